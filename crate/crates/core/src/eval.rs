//! Pixel metrics per slide, macro aggregation by grade, and stage timing.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pyramid::{PyramidImage, Raster};
use crate::tissue::LOWRES_SIDE;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub recall: f64,
    pub precision: f64,
    pub dsc: f64,
}

/// Pixel counts and scores for one predicted mask. Nonzero bytes are
/// foreground. With no truth pixels, an empty prediction scores 1 on every
/// metric and a nonempty one scores recall 1, precision 0, dice 0. The
/// mirrored case (truth present, nothing predicted) scores recall 0,
/// precision 1, dice 0, so swapping the arguments swaps recall and precision.
pub fn score_slide(pred: &Raster, truth: &Raster) -> Result<Metrics> {
    if (pred.width, pred.height, pred.channels) != (truth.width, truth.height, truth.channels) {
        return Err(Error::invalid(format!(
            "prediction is {}x{}x{}, truth is {}x{}x{}",
            pred.width, pred.height, pred.channels, truth.width, truth.height, truth.channels
        )));
    }
    let (mut tp, mut fp, mut fn_) = (0u64, 0u64, 0u64);
    for (&p, &t) in pred.data.iter().zip(&truth.data) {
        match (p != 0, t != 0) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    let ratio = |num: u64, den: u64, empty: f64| if den == 0 { empty } else { num as f64 / den as f64 };
    let truth_empty = tp + fn_ == 0;
    let pred_empty = tp + fp == 0;
    let (recall, precision, dsc) = if truth_empty && pred_empty {
        (1.0, 1.0, 1.0)
    } else {
        (
            ratio(tp, tp + fn_, 1.0),
            ratio(tp, tp + fp, 1.0),
            2.0 * tp as f64 / (2 * tp + fp + fn_) as f64,
        )
    };
    Ok(Metrics {
        tp,
        fp,
        fn_,
        recall,
        precision,
        dsc,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlideScore {
    pub slide_id: String,
    pub grade: u8,
    pub recall: f64,
    pub precision: f64,
    pub dsc: f64,
}

impl SlideScore {
    pub fn new(slide_id: &str, grade: u8, m: &Metrics) -> Self {
        Self {
            slide_id: slide_id.to_string(),
            grade,
            recall: m.recall,
            precision: m.precision,
            dsc: m.dsc,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Population standard deviation.
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self::default();
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Self { mean, std: var.sqrt() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub count: usize,
    pub recall: MeanStd,
    pub precision: MeanStd,
    pub dsc: MeanStd,
}

impl GroupSummary {
    fn of(scores: &[&SlideScore]) -> Self {
        let col = |f: fn(&SlideScore) -> f64| scores.iter().map(|s| f(s)).collect::<Vec<_>>();
        Self {
            count: scores.len(),
            recall: MeanStd::of(&col(|s| s.recall)),
            precision: MeanStd::of(&col(|s| s.precision)),
            dsc: MeanStd::of(&col(|s| s.dsc)),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub design: String,
    /// Sorted by slide id.
    pub slides: Vec<SlideScore>,
    pub overall: GroupSummary,
    pub by_grade: BTreeMap<u8, GroupSummary>,
}

pub fn aggregate(design: &str, scores: &[SlideScore]) -> Result<Report> {
    if scores.is_empty() {
        return Err(Error::invalid("cannot aggregate zero slide scores"));
    }
    let mut slides = scores.to_vec();
    slides.sort_by(|a, b| a.slide_id.cmp(&b.slide_id));
    let all: Vec<&SlideScore> = slides.iter().collect();
    let mut groups: BTreeMap<u8, Vec<&SlideScore>> = BTreeMap::new();
    for s in &slides {
        groups.entry(s.grade).or_default().push(s);
    }
    Ok(Report {
        design: design.to_string(),
        overall: GroupSummary::of(&all),
        by_grade: groups.into_iter().map(|(g, v)| (g, GroupSummary::of(&v))).collect(),
        slides,
    })
}

impl Report {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("slide_id,grade,recall,precision,dsc\n");
        for s in &self.slides {
            out.push_str(&format!("{},{},{},{},{}\n", s.slide_id, s.grade, s.recall, s.precision, s.dsc));
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }
}

/// Scores many slides in parallel; results keep the input order.
pub fn score_all(items: &[(String, u8, Raster, Raster)]) -> Result<Vec<SlideScore>> {
    items
        .par_iter()
        .map(|(id, grade, pred, truth)| Ok(SlideScore::new(id, *grade, &score_slide(pred, truth)?)))
        .collect()
}

/// Area-weighted resample of a one-channel raster, in the 0–255 domain.
pub fn area_resize(src: &Raster, out_w: usize, out_h: usize) -> Result<Vec<f64>> {
    if src.channels != 1 || src.is_empty() || out_w == 0 || out_h == 0 {
        return Err(Error::invalid("area resize takes a non-empty one-channel raster"));
    }
    // per output index: list of (source index, weight) with weights summing to 1
    let spans = |n_in: usize, n_out: usize| -> Vec<Vec<(usize, f64)>> {
        let scale = n_in as f64 / n_out as f64;
        (0..n_out)
            .map(|o| {
                let (lo, hi) = (o as f64 * scale, (o + 1) as f64 * scale);
                let mut taps = Vec::new();
                let mut i = lo.floor() as usize;
                while (i as f64) < hi && i < n_in {
                    let overlap = (hi.min(i as f64 + 1.0) - lo.max(i as f64)).max(0.0);
                    if overlap > 0.0 {
                        taps.push((i, overlap / scale));
                    }
                    i += 1;
                }
                taps
            })
            .collect()
    };
    let xs = spans(src.width, out_w);
    let ys = spans(src.height, out_h);
    let mut out = vec![0.0; out_w * out_h];
    out.par_chunks_mut(out_w).enumerate().for_each(|(oy, row)| {
        for (ox, xt) in xs.iter().enumerate() {
            let mut acc = 0.0;
            for &(sy, wy) in &ys[oy] {
                let line = src.row(sy);
                for &(sx, wx) in xt {
                    acc += wy * wx * line[sx] as f64;
                }
            }
            row[ox] = acc;
        }
    });
    Ok(out)
}

/// Ground truth at the refinement resolution: the truth pyramid's
/// low-resolution level, box-averaged to 1024² and thresholded at one half.
pub fn lowres_truth(truth: &PyramidImage) -> Result<Raster> {
    let level = truth
        .smallest_level_with_side(LOWRES_SIDE as u64)
        .ok_or_else(|| Error::invalid("no truth level reaches 1024 pixels"))?;
    let src = truth.level_raster(level)?;
    let avg = area_resize(&src, LOWRES_SIDE, LOWRES_SIDE)?;
    Raster::new(
        LOWRES_SIDE,
        LOWRES_SIDE,
        1,
        avg.iter().map(|&v| if v / 255.0 > 0.5 { 255 } else { 0 }).collect(),
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub name: String,
    pub samples: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

impl StageTiming {
    fn new(name: &str, samples: Vec<f64>) -> Self {
        let s = MeanStd::of(&samples);
        Self {
            name: name.to_string(),
            samples,
            mean: s.mean,
            std: s.std,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub repetitions: usize,
    pub stages: Vec<StageTiming>,
    pub total: StageTiming,
}

impl BenchReport {
    /// Share of the mean total spent in `stage`.
    pub fn fraction(&self, stage: &str) -> Option<f64> {
        let s = self.stages.iter().find(|s| s.name == stage)?;
        (self.total.mean > 0.0).then(|| s.mean / self.total.mean)
    }

    pub fn to_table(&self) -> String {
        let mut out = String::from("stage,mean_s,std_s,fraction\n");
        for s in self.stages.iter().chain(std::iter::once(&self.total)) {
            let frac = if self.total.mean > 0.0 { s.mean / self.total.mean } else { 0.0 };
            out.push_str(&format!("{},{:.6},{:.6},{:.4}\n", s.name, s.mean, s.std, frac));
        }
        out
    }
}

pub type Stage<'a> = (&'a str, Box<dyn FnMut() -> Result<()> + 'a>);

/// Runs the stages in order once as warm-up, then `repetitions` timed times.
/// A repetition's total is the sum of its stage times.
pub fn benchmark(stages: &mut [Stage<'_>], repetitions: usize) -> Result<BenchReport> {
    if repetitions == 0 || stages.is_empty() {
        return Err(Error::invalid("benchmark needs at least one stage and one repetition"));
    }
    let run = |stages: &mut [Stage<'_>]| -> Result<Vec<f64>> {
        stages
            .iter_mut()
            .map(|(name, f)| {
                let start = Instant::now();
                f().map_err(|e| Error::Stage {
                    stage: name.to_string(),
                    source: Box::new(e),
                })?;
                Ok(start.elapsed().as_secs_f64())
            })
            .collect()
    };
    run(stages)?;
    let mut per_stage = vec![Vec::with_capacity(repetitions); stages.len()];
    let mut totals = Vec::with_capacity(repetitions);
    for _ in 0..repetitions {
        let t = run(stages)?;
        totals.push(t.iter().sum());
        for (acc, v) in per_stage.iter_mut().zip(t) {
            acc.push(v);
        }
    }
    Ok(BenchReport {
        repetitions,
        stages: stages
            .iter()
            .zip(per_stage)
            .map(|((name, _), s)| StageTiming::new(name, s))
            .collect(),
        total: StageTiming::new("total", totals),
    })
}
