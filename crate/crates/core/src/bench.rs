//! Timing harness for inference with and without category pruning.

use serde::Serialize;

use crate::cer::TopK;
use crate::data::Sample;
use crate::encoder::ImageTensor;
use crate::error::Result;
use crate::metrics::{compute_miou, MIoUAccumulator};
use crate::model::{Prediction, Sed};
use crate::params::ParamSet;
use crate::text::TextEmbeddings;

pub const WARMUP_RUNS: usize = 2;
pub const TIMED_RUNS: usize = 5;

/// One image's timing record. Stage times come from the run whose
/// end-to-end time is the median.
#[derive(Clone, Debug, Serialize)]
pub struct BenchReport {
    pub image: String,
    /// `"all"`, an integer, or `"off"` when pruning is disabled.
    pub k: String,
    pub threads: usize,
    pub encoder_ms: f64,
    pub cost_map_ms: f64,
    pub decoder_layer_ms: Vec<f64>,
    pub decoder_ms: f64,
    pub head_ms: f64,
    pub end_to_end_ms: f64,
    /// Categories entering each decoder layer.
    pub active_per_layer: Vec<usize>,
    pub miou: Option<f64>,
}

impl BenchReport {
    /// Report for one prediction over `n` categories.
    pub fn new(image: &str, top_k: Option<TopK>, pred: &Prediction, end_to_end_ms: f64, n: usize, miou: Option<f64>) -> Self {
        let times = &pred.times;
        let active_per_layer = match &pred.cer {
            Some(c) => c.per_layer_active.clone(),
            None => vec![n; times.decoder_layer_ms.len()],
        };
        Self {
            image: image.to_string(),
            k: k_label(top_k),
            threads: 1,
            encoder_ms: times.encoder_ms,
            cost_map_ms: times.cost_map_ms,
            decoder_layer_ms: times.decoder_layer_ms.clone(),
            decoder_ms: times.decoder_ms(),
            head_ms: times.head_ms,
            end_to_end_ms,
            active_per_layer,
            miou,
        }
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("report serialises")
    }
}

pub fn k_label(top_k: Option<TopK>) -> String {
    top_k.map_or_else(|| "off".to_string(), |k| k.to_string())
}

/// Runs `WARMUP_RUNS` discarded and `TIMED_RUNS` timed predictions and keeps
/// the median one.
pub fn time_prediction(
    model: &Sed,
    params: &ParamSet<f32>,
    image: &ImageTensor<f32>,
    e: &TextEmbeddings<f32>,
    top_k: Option<TopK>,
    warmup: usize,
    runs: usize,
) -> Result<(Prediction, f64)> {
    for _ in 0..warmup {
        model.predict(params, image, e, top_k)?;
    }
    let mut timed = Vec::with_capacity(runs.max(1));
    for _ in 0..runs.max(1) {
        let start = std::time::Instant::now();
        let p = model.predict(params, image, e, top_k)?;
        timed.push((start.elapsed().as_secs_f64() * 1e3, p));
    }
    timed.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mid = timed.len() / 2;
    let (ms, p) = timed.swap_remove(mid);
    Ok((p, ms))
}

/// Benchmarks every sample and accumulates mIoU over the set.
pub struct BenchRun {
    pub reports: Vec<BenchReport>,
    pub predictions: Vec<Vec<u16>>,
    pub miou: f64,
}

impl BenchRun {
    pub fn decoder_ms(&self) -> f64 {
        self.reports.iter().map(|r| r.decoder_ms).sum()
    }
}

#[allow(clippy::too_many_arguments)]
pub fn run_benchmark(
    model: &Sed,
    params: &ParamSet<f32>,
    samples: &[(String, Sample)],
    e: &TextEmbeddings<f32>,
    top_k: Option<TopK>,
    warmup: usize,
    runs: usize,
) -> Result<BenchRun> {
    let n = e.num_categories();
    let mut total = MIoUAccumulator::new(n);
    let mut reports = Vec::with_capacity(samples.len());
    let mut predictions = Vec::with_capacity(samples.len());
    for (name, s) in samples {
        let (pred, ms) = time_prediction(model, params, &s.image_tensor()?, e, top_k, warmup, runs)?;
        let mut acc = MIoUAccumulator::new(n);
        acc.add(&s.label.values, &pred.labels)?;
        total.merge(&acc)?;
        let miou = compute_miou(&acc).ok().map(|r| r.miou);
        reports.push(BenchReport::new(name, top_k, &pred, ms, n, miou));
        predictions.push(pred.labels);
    }
    Ok(BenchRun { reports, predictions, miou: compute_miou(&total)?.miou })
}
