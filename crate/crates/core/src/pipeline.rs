//! The stages behind each CLI command, working in one flat directory.
//!
//! Files are found by name: `<id>.hpyr`, `<id>.truth.hpyr`, `<id>.index.csv`,
//! `<id>.otsu.pgm`, `<id>.heat.pfm`, `<id>.patchwise.pgm`, `<id>.mask.pgm`,
//! plus `manifest.json`, `cluster.json`, `classifier.json`, `history.csv`,
//! `refiner.json`, `report.<design>.csv`, `report.json` and `bench.csv`.

use std::cell::RefCell;
use std::collections::HashMap;
use std::fmt;
use std::ops::RangeInclusive;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::cluster::{self, BuiltinDescriptor, ClusterModel, ExternalFeatures, FeatureExtractor, FeatureVector};
use crate::config::{ConfigError, RunConfig};
use crate::error::Error;
use crate::eval::{self, BenchReport, Report, SlideScore, Stage};
use crate::heatmap::{self, ClassifierScorer, FusedInput, Heatmap, LogisticRefiner, RefinerModel};
use crate::learn::{self, Checkpoint, PatchClassifier};
use crate::pyramid::{self, ManifestEntry, PyramidImage, SlideManifest, Split};
use crate::sampler::{self, BatchStream, StreamEpochs, StreamSource, CLASSES};
use crate::tissue::{self, PatchIndex};

pub const DESIGNS: [&str; 3] = ["otsu", "patchwise", "refined"];

#[derive(Debug)]
pub enum PipelineError {
    Config(String),
    Missing { artifact: PathBuf, hint: String },
    Runtime(Error),
}

impl PipelineError {
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => 2,
            PipelineError::Missing { .. } => 3,
            PipelineError::Runtime(_) => 4,
        }
    }
}

impl fmt::Display for PipelineError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PipelineError::Config(m) => write!(f, "configuration error: {m}"),
            PipelineError::Missing { artifact, hint } => {
                write!(f, "missing prerequisite {} ({hint})", artifact.display())
            }
            PipelineError::Runtime(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for PipelineError {}

impl From<Error> for PipelineError {
    fn from(e: Error) -> Self {
        PipelineError::Runtime(e)
    }
}

impl From<ConfigError> for PipelineError {
    fn from(e: ConfigError) -> Self {
        PipelineError::Config(e.to_string())
    }
}

pub type Outcome<T> = std::result::Result<T, PipelineError>;

fn require(path: &Path, hint: &str) -> Outcome<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(PipelineError::Missing {
            artifact: path.to_path_buf(),
            hint: hint.to_string(),
        })
    }
}

/// Synthetic slide ids are the zero-padded seed.
pub fn slide_id(seed: u64) -> String {
    format!("slide{seed:03}")
}

/// Counts for a 70/15/15 split; rounding leftovers go to training.
pub fn split_counts(n: usize) -> (usize, usize, usize) {
    let val = n * 15 / 100;
    let test = n * 15 / 100;
    (n - val - test, val, test)
}

/// Writes image and mask pyramids for every seed plus a manifest.
pub fn generate(seeds: RangeInclusive<u64>, out: &Path, cfg: &RunConfig) -> Outcome<SlideManifest> {
    if seeds.is_empty() {
        return Err(PipelineError::Config(format!(
            "empty seed range {}..{}",
            seeds.start(),
            seeds.end()
        )));
    }
    std::fs::create_dir_all(out)
        .map_err(|e| PipelineError::Config(format!("cannot create {}: {e}", out.display())))?;
    let probe = out.join(".h2g-write-test");
    std::fs::write(&probe, b"")
        .and_then(|_| std::fs::remove_file(&probe))
        .map_err(|e| PipelineError::Config(format!("{} is not writable: {e}", out.display())))?;

    let spec = cfg.synthetic.spec();
    let mut entries = Vec::new();
    for seed in seeds {
        let id = slide_id(seed);
        let slide = pyramid::generate_synthetic_slide(seed, &spec)?;
        let image = format!("{id}.hpyr");
        let mask = format!("{id}.truth.hpyr");
        pyramid::write_file(&slide.image, out.join(&image))?;
        pyramid::write_file(&slide.truth, out.join(&mask))?;
        log::info!("generated {id} (grade {})", slide.grade);
        entries.push(ManifestEntry {
            slide_id: id,
            image_path: image.into(),
            mask_path: mask.into(),
            grade: slide.grade,
            split: Split::Train,
        });
    }
    let (_, n_val, n_test) = split_counts(entries.len());
    let mut order: Vec<usize> = (0..entries.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed));
    for (rank, &i) in order.iter().enumerate() {
        entries[i].split = if rank < n_test {
            Split::Test
        } else if rank < n_test + n_val {
            Split::Validation
        } else {
            Split::Train
        };
    }
    let manifest = SlideManifest { entries };
    manifest.save(out.join("manifest.json"))?;
    Ok(manifest)
}

/// One run directory and the effective configuration.
pub struct Workspace {
    pub root: PathBuf,
    pub cfg: RunConfig,
    pub quiet: bool,
    manifest: SlideManifest,
    manifest_dir: PathBuf,
}

impl Workspace {
    pub fn open(root: &Path, cfg: RunConfig, quiet: bool) -> Outcome<Self> {
        let manifest_path = cfg.manifest.clone().unwrap_or_else(|| root.join("manifest.json"));
        require(&manifest_path, "run `generate` first")?;
        let manifest = SlideManifest::load(&manifest_path).map_err(|e| match e {
            Error::InvalidInput(m) => PipelineError::Config(format!("{}: {m}", manifest_path.display())),
            other => PipelineError::Runtime(other),
        })?;
        Ok(Self {
            root: root.to_path_buf(),
            manifest_dir: manifest_path.parent().unwrap_or(Path::new(".")).to_path_buf(),
            cfg,
            quiet,
            manifest,
        })
    }

    pub fn manifest(&self) -> &SlideManifest {
        &self.manifest
    }

    pub fn file(&self, name: impl AsRef<Path>) -> PathBuf {
        self.root.join(name)
    }

    pub fn slide_file(&self, id: &str, suffix: &str) -> PathBuf {
        self.root.join(format!("{id}.{suffix}"))
    }

    pub fn load_image(&self, e: &ManifestEntry) -> Outcome<PyramidImage> {
        let p = self.manifest_dir.join(&e.image_path);
        require(&p, "slide image listed in the manifest")?;
        Ok(pyramid::read_file(p)?)
    }

    pub fn load_truth(&self, e: &ManifestEntry) -> Outcome<PyramidImage> {
        let p = self.manifest_dir.join(&e.mask_path);
        require(&p, "ground-truth mask listed in the manifest")?;
        Ok(pyramid::read_file(p)?)
    }

    pub fn load_index(&self, id: &str) -> Outcome<PatchIndex> {
        let p = self.slide_file(id, "index.csv");
        require(&p, "run `preprocess` first")?;
        Ok(PatchIndex::read_csv(&p, id, self.cfg.level, self.cfg.patch_size)?)
    }

    fn entries(&self, splits: &[Split]) -> Vec<&ManifestEntry> {
        self.manifest.entries.iter().filter(|e| splits.contains(&e.split)).collect()
    }

    fn progress(&self, msg: &str) {
        if !self.quiet {
            eprintln!("{msg}");
        }
    }

    fn extractor(&self, indices: &[PatchIndex]) -> Outcome<Arc<dyn FeatureExtractor>> {
        let Some(dir) = &self.cfg.cluster.external_features else {
            return Ok(Arc::new(BuiltinDescriptor));
        };
        let mut ext: Option<ExternalFeatures> = None;
        for idx in indices {
            let p = dir.join(format!("{}.hfv", idx.slide_id));
            require(&p, "external feature file")?;
            let rows = cluster::read_hfv(&p)?;
            let dim = rows.first().map(|r| r.len()).unwrap_or(0);
            let table = ext.get_or_insert_with(|| ExternalFeatures::new(dim));
            let coords: Vec<(u64, u64)> = idx.records.iter().map(|r| (r.x, r.y)).collect();
            table.insert_slide(&idx.slide_id, &coords, &rows)?;
        }
        Ok(Arc::new(ext.unwrap_or_else(|| ExternalFeatures::new(0))))
    }

    /// Patch indices, pyramids and feature extractor for the given splits.
    fn stream_parts(
        &self,
        splits: &[Split],
    ) -> Outcome<(Vec<PatchIndex>, Arc<HashMap<String, Arc<PyramidImage>>>, Arc<dyn FeatureExtractor>)> {
        let entries = self.entries(splits);
        let indices = entries
            .iter()
            .map(|e| self.load_index(&e.slide_id))
            .collect::<Outcome<Vec<_>>>()?;
        let mut pyramids = HashMap::new();
        for e in &entries {
            pyramids.insert(e.slide_id.clone(), Arc::new(self.load_image(e)?));
        }
        let extractor = self.extractor(&indices)?;
        Ok((indices, Arc::new(pyramids), extractor))
    }
}

/// Patch indices and Otsu baseline masks for every slide.
pub fn preprocess(ws: &Workspace) -> Outcome<()> {
    for e in &ws.manifest.entries {
        let image = ws.load_image(e)?;
        let truth = ws.load_truth(e)?;
        let index = tissue::build_patch_index(&e.slide_id, &image, &truth, ws.cfg.level, ws.cfg.patch_size)?;
        index.write_csv(ws.slide_file(&e.slide_id, "index.csv"))?;
        let otsu = tissue::otsu_baseline(&image)?;
        heatmap::write_pgm(ws.slide_file(&e.slide_id, "otsu.pgm"), &otsu.to_raster())?;
        ws.progress(&format!(
            "preprocessed {}: {} tumour, {} non-tumour patches",
            e.slide_id,
            index.count(tissue::Label::Tumour),
            index.count(tissue::Label::NonTumour)
        ));
    }
    Ok(())
}

/// Fits the tissue-type clustering on sampled training patches and stamps
/// every index record with its cluster.
pub fn fit_cluster(ws: &Workspace) -> Outcome<ClusterModel> {
    let (indices, pyramids, extractor) = ws.stream_parts(&[Split::Train])?;
    let tree = sampler::build_tree(&ws.manifest, &indices, Split::Train)?;
    let mut spec = ws.cfg.batch_spec(false, ws.cfg.seed ^ 0xC1);
    spec.batch_size = ws.cfg.cluster.batch_size;
    let source = StreamSource {
        tree: Arc::new(tree),
        pyramids: Arc::clone(&pyramids),
        extractor: Arc::clone(&extractor),
        cluster: None,
        patch_size: ws.cfg.patch_size,
    };
    let mut stream = BatchStream::spawn(source, &spec)?;
    stream.quiet = true;
    let mut samples = Vec::new();
    for _ in 0..ws.cfg.cluster.batches {
        let b = stream.next_batch()?;
        samples.extend(b.inputs.chunks_exact(b.dim).map(|r| FeatureVector(r.to_vec())));
    }
    drop(stream);
    let (model, report) = cluster::fit(&samples, ws.cfg.cluster.variance_target, ws.cfg.cluster.k, ws.cfg.seed)?;
    model.save(ws.file("cluster.json"))?;
    ws.progress(&format!(
        "cluster model: {} components explain {:.4}, final inertia {:.4}",
        model.m,
        model.explained_ratio,
        report.inertia.last().copied().unwrap_or(0.0)
    ));

    // stamp every slide's records, not only training ones
    let all: Vec<&ManifestEntry> = ws.manifest.entries.iter().collect();
    let all_indices = all
        .iter()
        .map(|e| ws.load_index(&e.slide_id))
        .collect::<Outcome<Vec<_>>>()?;
    let extractor = ws.extractor(&all_indices)?;
    for (e, mut index) in all.into_iter().zip(all_indices) {
        let image = ws.load_image(e)?;
        let ps = ws.cfg.patch_size as usize;
        for r in &mut index.records {
            let patch = image.read_region(r.level, r.x as i64, r.y as i64, ps, ps)?;
            let f = extractor.extract((&r.slide_id, r.x, r.y), &patch)?;
            r.cluster = model.assign(&f)? as i32;
        }
        index.write_csv(ws.slide_file(&e.slide_id, "index.csv"))?;
    }
    Ok(model)
}

fn optional_val_tree(ws: &Workspace, indices: &[PatchIndex]) -> Outcome<Option<sampler::SampleTree>> {
    match sampler::build_tree(&ws.manifest, indices, Split::Validation) {
        Ok(t) => Ok(Some(t)),
        Err(Error::EmptyPopulation(m)) => {
            log::warn!("training without validation: {m}");
            Ok(None)
        }
        Err(e) => Err(e.into()),
    }
}

/// Trains the patch classifier from sampled batches.
pub fn train_patch(ws: &Workspace) -> Outcome<learn::History> {
    let cluster_path = ws.file("cluster.json");
    let cluster = if ws.cfg.train.loss.uses_clusters() {
        require(&cluster_path, "the cwce loss needs a cluster model; run `fit-cluster`")?;
        Some(Arc::new(ClusterModel::load(&cluster_path)?))
    } else {
        None
    };
    let (indices, pyramids, extractor) = ws.stream_parts(&[Split::Train, Split::Validation])?;
    let tree = sampler::build_tree(&ws.manifest, &indices, Split::Train)?;
    let val_tree = optional_val_tree(ws, &indices)?;

    let train_spec = ws.cfg.batch_spec(true, ws.cfg.seed);
    let val_spec = ws.cfg.batch_spec(false, ws.cfg.seed.wrapping_add(1));
    let source = |tree| StreamSource {
        tree: Arc::new(tree),
        pyramids: Arc::clone(&pyramids),
        extractor: Arc::clone(&extractor),
        cluster: cluster.clone(),
        patch_size: ws.cfg.patch_size,
    };
    let mut train_stream = BatchStream::spawn(source(tree), &train_spec)?;
    train_stream.quiet = ws.quiet;
    let mut train_src = StreamEpochs {
        stream: train_stream,
        batches_per_epoch: train_spec.train_batches,
    };
    let mut val_src = match val_tree {
        Some(t) => {
            let mut s = BatchStream::spawn(source(t), &val_spec)?;
            s.quiet = true;
            Some(StreamEpochs {
                stream: s,
                batches_per_epoch: val_spec.val_batches,
            })
        }
        None => None,
    };

    let model = PatchClassifier::new(extractor.dim(), ws.cfg.train.hidden, CLASSES, ws.cfg.seed);
    let (model, history) = learn::train(
        model,
        &mut train_src,
        val_src.as_mut().map(|v| v as &mut dyn learn::EpochSource),
        &ws.cfg.train.train_config(),
    )?;
    Checkpoint {
        model,
        loss: ws.cfg.train.loss,
        seed: ws.cfg.seed,
    }
    .save(ws.file("classifier.json"))?;
    std::fs::write(ws.file("history.csv"), history.to_csv()).map_err(Error::from)?;
    Ok(history)
}

fn load_classifier(ws: &Workspace) -> Outcome<PatchClassifier> {
    let p = ws.file("classifier.json");
    require(&p, "run `train-patch` first")?;
    Ok(Checkpoint::load(p)?.model)
}

fn inference_extractor(ws: &Workspace, id: &str) -> Outcome<Arc<dyn FeatureExtractor>> {
    if ws.cfg.cluster.external_features.is_some() {
        // external tables are keyed by the labelled index; inference reuses it
        let labelled = ws.load_index(id)?;
        return ws.extractor(std::slice::from_ref(&labelled));
    }
    Ok(Arc::new(BuiltinDescriptor))
}

/// Stage one for a single slide.
pub fn patchwise_heatmap(
    ws: &Workspace,
    id: &str,
    image: &PyramidImage,
    classifier: &PatchClassifier,
) -> Outcome<Heatmap> {
    let index = tissue::tissue_index(id, image, ws.cfg.level, ws.cfg.patch_size)?;
    let extractor = inference_extractor(ws, id)?;
    let scorer = ClassifierScorer {
        extractor: extractor.as_ref(),
        classifier,
    };
    Ok(heatmap::infer_slide(image, &index, &scorer, ws.cfg.workers)?)
}

/// Heatmaps and thresholded patch-wise masks for every slide.
pub fn infer(ws: &Workspace) -> Outcome<()> {
    let classifier = load_classifier(ws)?;
    for e in &ws.manifest.entries {
        let image = ws.load_image(e)?;
        let hm = patchwise_heatmap(ws, &e.slide_id, &image, &classifier)?;
        heatmap::write_pfm(ws.slide_file(&e.slide_id, "heat.pfm"), &hm.as_raster())?;
        let fused = heatmap::fuse(&image, &hm)?;
        let mask = heatmap::threshold_mask(&fused.heatmap_channel(), ws.cfg.eval.threshold);
        heatmap::write_pgm(ws.slide_file(&e.slide_id, "patchwise.pgm"), &mask)?;
        ws.progress(&format!("inferred {}", e.slide_id));
    }
    Ok(())
}

fn load_fused(ws: &Workspace, e: &ManifestEntry) -> Outcome<FusedInput> {
    let p = ws.slide_file(&e.slide_id, "heat.pfm");
    require(&p, "run `infer` first")?;
    let hm = Heatmap::from_raster(heatmap::read_pfm(&p)?, ws.cfg.level, ws.cfg.patch_size)?;
    let image = ws.load_image(e)?;
    let grid = heatmap::grid_dims(&image, ws.cfg.level, ws.cfg.patch_size)?;
    if (hm.width, hm.height) != grid {
        return Err(PipelineError::Config(format!(
            "{} is {}x{} but patch_size {} gives a {}x{} grid",
            p.display(),
            hm.width,
            hm.height,
            ws.cfg.patch_size,
            grid.0,
            grid.1
        )));
    }
    Ok(heatmap::fuse(&image, &hm)?)
}

/// Trains the built-in refiner on the training slides.
pub fn refine_train(ws: &Workspace) -> Outcome<Option<LogisticRefiner>> {
    if ws.cfg.refine.executor.is_some() {
        ws.progress("external refiner configured; nothing to train");
        return Ok(None);
    }
    let mut pairs = Vec::new();
    for e in ws.entries(&[Split::Train]) {
        let fused = load_fused(ws, e)?;
        let truth = eval::lowres_truth(&ws.load_truth(e)?)?;
        pairs.push((fused, truth));
    }
    let model = heatmap::train_refiner(&pairs, &ws.cfg.refiner_config())?;
    model.save(ws.file("refiner.json"))?;
    ws.progress(&format!(
        "refiner trained, validation loss {:.5}",
        model.validation_loss.unwrap_or(f64::NAN)
    ));
    Ok(Some(model))
}

fn refiner_model(ws: &Workspace) -> Outcome<RefinerModel> {
    if let Some(cmd) = &ws.cfg.refine.executor {
        return Ok(RefinerModel::External(cmd.clone()));
    }
    let p = ws.file("refiner.json");
    require(&p, "run `refine-train` first")?;
    Ok(RefinerModel::Builtin(LogisticRefiner::load(p)?))
}

/// Refined binary masks for every slide.
pub fn refine(ws: &Workspace) -> Outcome<()> {
    let model = refiner_model(ws)?;
    for e in &ws.manifest.entries {
        let fused = load_fused(ws, e)?;
        let prob = heatmap::refine(&fused, &model)?;
        let mask = heatmap::threshold_mask(&prob, ws.cfg.eval.threshold);
        heatmap::write_pgm(ws.slide_file(&e.slide_id, "mask.pgm"), &mask)?;
    }
    Ok(())
}

fn design_suffix(design: &str) -> &'static str {
    match design {
        "otsu" => "otsu.pgm",
        "patchwise" => "patchwise.pgm",
        _ => "mask.pgm",
    }
}

#[derive(Serialize)]
struct ReportFile<'a> {
    config_hash: String,
    split: Split,
    designs: &'a [Report],
}

/// Scores each design whose masks exist for every test slide.
pub fn evaluate(ws: &Workspace) -> Outcome<Vec<Report>> {
    let test = ws.entries(&[Split::Test]);
    if test.is_empty() {
        return Err(PipelineError::Config("the manifest has no test slides".into()));
    }
    let present: Vec<&str> = DESIGNS
        .into_iter()
        .filter(|d| test.iter().all(|e| ws.slide_file(&e.slide_id, design_suffix(d)).exists()))
        .collect();
    if present.is_empty() {
        return Err(PipelineError::Missing {
            artifact: ws.slide_file(&test[0].slide_id, "*.pgm"),
            hint: "no design has masks for every test slide".into(),
        });
    }
    let truths = test
        .iter()
        .map(|e| Ok(eval::lowres_truth(&ws.load_truth(e)?)?))
        .collect::<Outcome<Vec<_>>>()?;
    let mut reports = Vec::new();
    for design in present {
        let mut scores = Vec::new();
        for (e, truth) in test.iter().zip(&truths) {
            let pred = heatmap::read_pgm(ws.slide_file(&e.slide_id, design_suffix(design)))?;
            let m = eval::score_slide(&pred, truth)?;
            scores.push(SlideScore::new(&e.slide_id, e.grade, &m));
        }
        let report = eval::aggregate(design, &scores)?;
        report.write_csv(ws.file(format!("report.{design}.csv")))?;
        reports.push(report);
    }
    let file = ReportFile {
        config_hash: ws.cfg.hash(),
        split: Split::Test,
        designs: &reports,
    };
    let text = serde_json::to_string_pretty(&file).map_err(Error::from)? + "\n";
    std::fs::write(ws.file("report.json"), text).map_err(Error::from)?;
    Ok(reports)
}

/// Times the patch-wise and refinement stages on one slide.
pub fn bench(ws: &Workspace) -> Outcome<BenchReport> {
    let entry = match &ws.cfg.eval.bench_slide {
        Some(id) => ws
            .manifest
            .get(id)
            .ok_or_else(|| PipelineError::Config(format!("bench slide {id} is not in the manifest")))?,
        None => ws
            .entries(&[Split::Test])
            .first()
            .copied()
            .or(ws.manifest.entries.first())
            .ok_or_else(|| PipelineError::Config("the manifest is empty".into()))?,
    };
    let classifier = load_classifier(ws)?;
    let model = refiner_model(ws)?;
    let image = ws.load_image(entry)?;
    let report = bench_slide(ws, &entry.slide_id, &image, &classifier, &model)?;
    std::fs::write(ws.file("bench.csv"), report.to_table()).map_err(Error::from)?;
    Ok(report)
}

pub fn bench_slide(
    ws: &Workspace,
    id: &str,
    image: &PyramidImage,
    classifier: &PatchClassifier,
    model: &RefinerModel,
) -> Outcome<BenchReport> {
    let heat: RefCell<Option<Heatmap>> = RefCell::new(None);
    let failure: RefCell<Option<PipelineError>> = RefCell::new(None);
    let mut patchwise = || -> crate::Result<()> {
        match patchwise_heatmap(ws, id, image, classifier) {
            Ok(hm) => {
                *heat.borrow_mut() = Some(hm);
                Ok(())
            }
            Err(PipelineError::Runtime(e)) => Err(e),
            Err(other) => {
                let msg = other.to_string();
                *failure.borrow_mut() = Some(other);
                Err(Error::InvalidInput(msg))
            }
        }
    };
    let threshold = ws.cfg.eval.threshold;
    let mut refinement = || -> crate::Result<()> {
        let guard = heat.borrow();
        let hm = guard.as_ref().ok_or_else(|| Error::InvalidInput("no heatmap to refine".into()))?;
        let fused = heatmap::fuse(image, hm)?;
        let prob = heatmap::refine(&fused, model)?;
        std::hint::black_box(heatmap::threshold_mask(&prob, threshold));
        Ok(())
    };
    let mut stages: Vec<Stage> = vec![("patchwise", Box::new(&mut patchwise)), ("refinement", Box::new(&mut refinement))];
    let result = eval::benchmark(&mut stages, ws.cfg.eval.bench_repetitions);
    drop(stages);
    if let Some(f) = failure.into_inner() {
        return Err(f);
    }
    Ok(result?)
}
