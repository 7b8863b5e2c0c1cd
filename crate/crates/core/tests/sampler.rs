mod common;

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;
use std::time::Instant;

use h2g::cluster::{fit, BuiltinDescriptor, FeatureExtractor};
use h2g::pyramid::{generate_synthetic_slide, SlideManifest, SlideSpec, Split};
use h2g::sampler::{build_tree, sample_path, AugmentSpec, BatchSpec, BatchStream, SampleTree, StreamSource, CLASSES};
use h2g::tissue::{build_patch_index, Label, PatchIndex};
use h2g::Error;

use common::{chi_square_uniform, entry, rng, uneven_tree};

const DRAWS: usize = 30_000;

#[test]
fn every_stage_is_uniform() {
    let (manifest, indices) = uneven_tree();
    let tree = build_tree(&manifest, &indices, Split::Train).unwrap();
    let mut r = rng(2024);
    let mut grade = BTreeMap::<u8, u64>::new();
    let mut slide = BTreeMap::<(u8, usize), u64>::new();
    let mut class = BTreeMap::<(u8, usize, Label), u64>::new();
    let mut patch = BTreeMap::<(u8, usize, Label, usize), u64>::new();
    for _ in 0..DRAWS {
        let p = sample_path(&tree, &mut r);
        *grade.entry(p.grade).or_default() += 1;
        *slide.entry((p.grade, p.slide)).or_default() += 1;
        *class.entry((p.grade, p.slide, p.class)).or_default() += 1;
        *patch.entry((p.grade, p.slide, p.class, p.patch)).or_default() += 1;
    }

    let counts: Vec<u64> = grade.values().copied().collect();
    assert_eq!(counts.len(), 3);
    for &c in &counts {
        let f = c as f64 / DRAWS as f64;
        assert!((0.313..=0.353).contains(&f), "grade frequency {f}");
    }
    let (_, p) = chi_square_uniform(&counts);
    assert!(p > 0.001, "grade stage rejected: p = {p}");

    for (&g, slides) in &tree.grades {
        let obs: Vec<u64> = (0..slides.len()).map(|s| slide.get(&(g, s)).copied().unwrap_or(0)).collect();
        let (_, p) = chi_square_uniform(&obs);
        assert!(p > 0.001, "slide stage in grade {g} rejected: p = {p}");
        for (s, node) in slides.iter().enumerate() {
            let obs: Vec<u64> = node
                .classes
                .iter()
                .map(|(l, _)| class.get(&(g, s, *l)).copied().unwrap_or(0))
                .collect();
            let (_, p) = chi_square_uniform(&obs);
            assert!(p > 0.001, "class stage on {} rejected: p = {p}", node.slide_id);
        }
    }

    // patch stage: pool per-leaf statistics; each leaf is uniform under H0,
    // so the summed statistic is chi-square with the summed degrees of freedom
    use statrs::distribution::{ChiSquared, ContinuousCDF};
    let (mut stat, mut dof) = (0.0, 0.0);
    for (&g, slides) in &tree.grades {
        for (s, node) in slides.iter().enumerate() {
            for (l, recs) in &node.classes {
                let obs: Vec<u64> = (0..recs.len()).map(|i| patch.get(&(g, s, *l, i)).copied().unwrap_or(0)).collect();
                let (x, _) = chi_square_uniform(&obs);
                stat += x;
                dof += (recs.len() - 1) as f64;
            }
        }
    }
    let p = 1.0 - ChiSquared::new(dof).unwrap().cdf(stat);
    assert!(p > 0.001, "patch stage rejected: p = {p}");
}

#[test]
fn conditional_class_draws_are_even() {
    let (manifest, indices) = uneven_tree();
    let tree = build_tree(&manifest, &indices, Split::Train).unwrap();
    // condition on one two-class slide by sampling its subtree alone
    let node = tree.grades[&3][0].clone();
    let sub = SampleTree {
        grades: BTreeMap::from([(3, vec![node])]),
    };
    let mut r = rng(5);
    let tumour = (0..10_000)
        .filter(|_| sample_path(&sub, &mut r).class == Label::Tumour)
        .count();
    let f = tumour as f64 / 10_000.0;
    assert!((f - 0.5).abs() <= 0.03, "{f}");
}

#[test]
fn tree_conserves_and_prunes() {
    let (manifest, indices) = uneven_tree();
    let tree = build_tree(&manifest, &indices, Split::Train).unwrap();
    assert_eq!(tree.record_count(), indices.iter().map(|i| i.len()).sum::<usize>());
    let lonely = tree.slide("s04").unwrap();
    assert_eq!(lonely.classes.len(), 1);
    assert_eq!(lonely.classes[0].0, Label::NonTumour);
    assert!(matches!(
        build_tree(&manifest, &indices, Split::Test),
        Err(Error::EmptyPopulation(_))
    ));
}

struct Fixture {
    manifest: SlideManifest,
    indices: Vec<PatchIndex>,
    pyramids: Arc<HashMap<String, Arc<h2g::pyramid::PyramidImage>>>,
}

fn fixture(side: usize, patch: u32, seeds: &[u64]) -> Fixture {
    let mut entries = Vec::new();
    let mut indices = Vec::new();
    let mut pyramids = HashMap::new();
    for &seed in seeds {
        let id = format!("slide{seed:03}");
        let slide = generate_synthetic_slide(seed, &SlideSpec::square(side)).unwrap();
        indices.push(build_patch_index(&id, &slide.image, &slide.truth, 0, patch).unwrap());
        entries.push(entry(&id, slide.grade, Split::Train));
        pyramids.insert(id, Arc::new(slide.image));
    }
    Fixture {
        manifest: SlideManifest { entries },
        indices,
        pyramids: Arc::new(pyramids),
    }
}

impl Fixture {
    fn source(&self, patch: u32, cluster: Option<Arc<h2g::cluster::ClusterModel>>) -> StreamSource {
        StreamSource {
            tree: Arc::new(build_tree(&self.manifest, &self.indices, Split::Train).unwrap()),
            pyramids: Arc::clone(&self.pyramids),
            extractor: Arc::new(BuiltinDescriptor),
            cluster,
            patch_size: patch,
        }
    }
}

fn spec(batch: usize, workers: usize, capacity: usize, seed: u64) -> BatchSpec {
    BatchSpec {
        batch_size: batch,
        train_batches: 3,
        val_batches: 1,
        workers,
        queue_capacity: capacity,
        augment: AugmentSpec::none(),
        seed,
        keep_pixels: false,
    }
}

#[test]
fn batches_have_the_promised_shape() {
    let fx = fixture(1024, 64, &[1, 2]);
    let mut stream = BatchStream::spawn(fx.source(64, None), &spec(4, 2, 3, 1)).unwrap();
    stream.quiet = true;
    let epoch = stream.next_epoch(3).unwrap();
    assert_eq!(epoch.len(), 3);
    for b in &epoch {
        assert_eq!(b.len(), 4);
        assert_eq!(b.classes, CLASSES);
        for i in 0..4 {
            let row = &b.y[i * CLASSES..(i + 1) * CLASSES];
            assert_eq!(row.iter().sum::<f64>(), 1.0);
            assert!(row.iter().all(|&v| v == 0.0 || v == 1.0));
            assert_eq!(b.label(i), b.records[i].label.index());
        }
        assert!(b.q.iter().all(|&q| q == -1));
    }
}

#[test]
fn cluster_ids_fall_in_range() {
    let fx = fixture(1024, 64, &[3]);
    let feats: Vec<_> = fx.indices[0]
        .records
        .iter()
        .take(60)
        .map(|r| {
            let p = fx.pyramids[&r.slide_id].read_region(0, r.x as i64, r.y as i64, 64, 64).unwrap();
            BuiltinDescriptor.extract((&r.slide_id, r.x, r.y), &p).unwrap()
        })
        .collect();
    let (model, _) = fit(&feats, 0.95, 5, 1).unwrap();
    let mut s = spec(8, 2, 4, 9);
    s.augment = AugmentSpec::default();
    let mut stream = BatchStream::spawn(fx.source(64, Some(Arc::new(model))), &s).unwrap();
    for _ in 0..5 {
        let b = stream.next_batch().unwrap();
        assert!(b.q.iter().all(|&q| (0..5).contains(&q)), "{:?}", b.q);
    }
}

#[test]
fn unaugmented_pixels_equal_region_reads() {
    let fx = fixture(1024, 64, &[4, 5]);
    for workers in [1, 4] {
        let mut s = spec(6, workers, 5, 3);
        s.keep_pixels = true;
        let mut stream = BatchStream::spawn(fx.source(64, None), &s).unwrap();
        for _ in 0..6 {
            let b = stream.next_batch().unwrap();
            for (rec, px) in b.records.iter().zip(&b.patches) {
                let expected = fx.pyramids[&rec.slide_id]
                    .read_region(rec.level, rec.x as i64, rec.y as i64, 64, 64)
                    .unwrap();
                assert_eq!(px, &expected.data);
            }
        }
    }
}

#[test]
fn single_worker_stream_is_deterministic() {
    let fx = fixture(1024, 64, &[6, 7]);
    let mut s = spec(5, 1, 2, 42);
    s.augment = AugmentSpec::default();
    let run = || {
        let mut stream = BatchStream::spawn(fx.source(64, None), &s).unwrap();
        (0..4).map(|_| stream.next_batch().unwrap()).collect::<Vec<_>>()
    };
    let (a, b) = (run(), run());
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.records, y.records);
        assert_eq!(
            x.inputs.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            y.inputs.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }
}

#[test]
fn queue_depth_never_exceeds_capacity() {
    let fx = fixture(1024, 64, &[8]);
    for capacity in [1, 3] {
        let mut stream = BatchStream::spawn(fx.source(64, None), &spec(2, 4, capacity, 1)).unwrap();
        // let producers fill the queue and block before anything is consumed
        std::thread::sleep(std::time::Duration::from_millis(200));
        for _ in 0..20 {
            stream.next_batch().unwrap();
        }
        assert!(stream.max_queue_depth() >= 1);
        assert!(stream.max_queue_depth() <= capacity, "depth {} > {capacity}", stream.max_queue_depth());
    }
}

#[test]
fn worker_failure_ends_the_stream_with_an_io_error() {
    let fx = fixture(1024, 64, &[9]);
    let mut indices = fx.indices.clone();
    // a level the pyramid does not have makes every read fail
    for r in &mut indices[0].records {
        r.level = 40;
    }
    let source = StreamSource {
        tree: Arc::new(build_tree(&fx.manifest, &indices, Split::Train).unwrap()),
        ..fx.source(64, None)
    };
    let mut stream = BatchStream::spawn(source, &spec(2, 3, 2, 1)).unwrap();
    assert!(matches!(stream.next_batch(), Err(Error::Io(_))));
    assert!(matches!(stream.next_batch(), Err(Error::Io(_))));
    drop(stream);
}

/// Soft wall-clock bound; meaningful only with at least eight hardware threads.
#[test]
fn eight_workers_outpace_one() {
    let cpus = std::thread::available_parallelism().map_or(1, |n| n.get());
    if cpus < 8 {
        eprintln!("skipped: {cpus} hardware threads available, the bound assumes 8");
        return;
    }
    let fx = fixture(4096, 256, &[10]);
    let rate = |workers| {
        let mut stream = BatchStream::spawn(fx.source(256, None), &spec(16, workers, 20, 1)).unwrap();
        stream.next_batch().unwrap();
        let t = Instant::now();
        for _ in 0..40 {
            stream.next_batch().unwrap();
        }
        40.0 / t.elapsed().as_secs_f64()
    };
    let (one, eight) = (rate(1), rate(8));
    assert!(eight >= 3.0 * one, "8 workers {eight:.1} batch/s vs 1 worker {one:.1} batch/s");
}
