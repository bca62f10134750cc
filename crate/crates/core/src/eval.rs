//! Accuracy and size of networks and stitched nets, probability-averaging
//! ensembles, and the CSV reports built from them.
//!
//! Every argmax in this crate breaks ties toward the lowest class index.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generate::{read_csv, write_csv, GeneratedNet};
use crate::nn::Model;
use crate::stitch::StitchNet;
use crate::tensor::Tensor;
use crate::zoo::{apply_label_map, Dataset, LabelMap, Split};

/// Fraction of rows whose argmax equals the label.
pub fn accuracy_of(probs: &Tensor, labels: &[usize]) -> f64 {
    let correct = probs
        .argmax_rows()
        .iter()
        .zip(labels)
        .filter(|(p, l)| p == l)
        .count();
    correct as f64 / labels.len() as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Network,
    StitchNet,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassTally {
    pub correct: usize,
    pub total: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub model_id: String,
    pub kind: ModelKind,
    /// `correct / total`.
    pub accuracy: f64,
    pub correct: usize,
    pub total: usize,
    pub n_params: usize,
    pub n_fragments: usize,
    pub overall_cka: f64,
    /// Indexed by mapped class.
    pub per_class: Vec<ClassTally>,
}

/// Outputs of `model` on `images`, mapped through `map`.
fn mapped_outputs(model: &dyn Model, images: &Tensor, map: &LabelMap) -> Result<Tensor> {
    let width = model.output_width()?;
    if map.source_span() > width {
        return Err(Error::Config(format!(
            "label map reads class {} but '{}' has {width} outputs",
            map.source_span() - 1,
            model.model_id()
        )));
    }
    apply_label_map(&model.forward(images)?, map)
}

/// Maps dataset labels; samples whose class the map drops are skipped.
fn mapped_labels(d: &Dataset, map: &LabelMap) -> (Vec<usize>, Vec<usize>) {
    let mut keep = Vec::new();
    let mut labels = Vec::new();
    for (i, &l) in d.labels().iter().enumerate() {
        if let Some(t) = map.target(l) {
            keep.push(i);
            labels.push(t);
        }
    }
    (keep, labels)
}

fn check_eval_split(d: &Dataset) -> Result<()> {
    if d.split() == Split::Train {
        return Err(Error::Config(
            "evaluation needs held-out data; got the training split".into(),
        ));
    }
    Ok(())
}

/// Scores `model` on `d`: argmax of the mapped outputs against the mapped
/// labels.
pub fn evaluate(model: &dyn Model, d: &Dataset, map: &LabelMap) -> Result<EvalReport> {
    check_eval_split(d)?;
    let (keep, labels) = mapped_labels(d, map);
    if keep.is_empty() {
        return Err(Error::Config("label map keeps no evaluation samples".into()));
    }
    let images = d.images().select_samples(&keep)?;
    let predicted = mapped_outputs(model, &images, map)?.argmax_rows();
    let mut per_class = vec![ClassTally { correct: 0, total: 0 }; map.num_targets()];
    for (&p, &l) in predicted.iter().zip(&labels) {
        per_class[l].total += 1;
        per_class[l].correct += usize::from(p == l);
    }
    let correct = per_class.iter().map(|c| c.correct).sum();
    let (kind, n_fragments) = match model.fragment_count() {
        Some(n) => (ModelKind::StitchNet, n),
        None => (ModelKind::Network, 1),
    };
    Ok(EvalReport {
        model_id: model.model_id().to_string(),
        kind,
        accuracy: correct as f64 / labels.len() as f64,
        correct,
        total: labels.len(),
        n_params: model.num_params(),
        n_fragments,
        overall_cka: model.overall_cka(),
        per_class,
    })
}

/// Evaluates several models in parallel; reports keep the input order.
pub fn evaluate_all(models: &[&dyn Model], d: &Dataset, map: &LabelMap) -> Result<Vec<EvalReport>> {
    models.par_iter().map(|m| evaluate(*m, d, map)).collect()
}

/// Mean of the models' mapped probabilities and its argmax.
pub fn ensemble_predict(
    models: &[&dyn Model],
    batch: &Tensor,
    map: &LabelMap,
) -> Result<(Tensor, Vec<usize>)> {
    let Some(first) = models.first() else {
        return Err(Error::Config("empty ensemble".into()));
    };
    let outputs = models
        .par_iter()
        .map(|m| mapped_outputs(*m, batch, map))
        .collect::<Result<Vec<_>>>()?;
    let shape = outputs[0].shape().to_vec();
    if let Some((i, o)) = outputs.iter().enumerate().find(|(_, o)| o.shape() != shape) {
        return Err(Error::dim(format!(
            "'{}' outputs {:?} but '{}' outputs {:?}",
            models[i].model_id(),
            o.shape(),
            first.model_id(),
            shape
        )));
    }
    let mut sum = vec![0.0; outputs[0].len()];
    for o in &outputs {
        for (s, v) in sum.iter_mut().zip(o.data()) {
            *s += v;
        }
    }
    let k = models.len() as f64;
    let probs = Tensor::new(shape, sum.into_iter().map(|s| s / k).collect())?;
    let labels = probs.argmax_rows();
    Ok((probs, labels))
}

/// Nets scoring strictly above `cka_min`, best first, at most `k` of them.
pub fn select_ensemble_pool(entries: &[GeneratedNet], cka_min: f64, k: usize) -> Vec<&GeneratedNet> {
    let mut chosen: Vec<&GeneratedNet> = entries.iter().filter(|e| e.score > cka_min).collect();
    chosen.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then_with(|| a.net.provenance().cmp(&b.net.provenance()))
    });
    chosen.truncate(k);
    chosen
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub ensemble_size: usize,
    pub accuracy: f64,
    pub total_params: usize,
    /// Lowest score among the members.
    pub min_score: f64,
}

pub const SWEEP_HEADER: [&str; 4] = ["ensemble_size", "accuracy", "total_params", "min_score"];

/// Accuracy of the ensembles formed by the first 1, 2, … nets of `ranked`.
pub fn ensemble_sweep(ranked: &[&StitchNet], d: &Dataset, map: &LabelMap) -> Result<Vec<SweepRow>> {
    check_eval_split(d)?;
    let (keep, labels) = mapped_labels(d, map);
    let images = d.images().select_samples(&keep)?;
    let outputs = ranked
        .par_iter()
        .map(|m| mapped_outputs(*m, &images, map))
        .collect::<Result<Vec<_>>>()?;
    let mut sum = vec![0.0; outputs.first().map_or(0, Tensor::len)];
    let mut rows = Vec::with_capacity(ranked.len());
    let mut params = 0;
    for (i, (o, net)) in outputs.iter().zip(ranked).enumerate() {
        for (s, v) in sum.iter_mut().zip(o.data()) {
            *s += v;
        }
        params += net.num_params();
        let k = (i + 1) as f64;
        let mean = Tensor::new(o.shape().to_vec(), sum.iter().map(|s| s / k).collect())?;
        rows.push(SweepRow {
            ensemble_size: i + 1,
            accuracy: accuracy_of(&mean, &labels),
            total_params: params,
            min_score: net.cumulative_score(),
        });
    }
    Ok(rows)
}

/// `results.csv` row. Per-class tallies are packed as `c/t;c/t;…`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ReportRow {
    model_id: String,
    kind: ModelKind,
    overall_cka: f64,
    accuracy: f64,
    correct: usize,
    total: usize,
    n_params: usize,
    n_fragments: usize,
    per_class: String,
}

pub const REPORT_HEADER: [&str; 9] = [
    "model_id",
    "kind",
    "overall_cka",
    "accuracy",
    "correct",
    "total",
    "n_params",
    "n_fragments",
    "per_class",
];

impl From<&EvalReport> for ReportRow {
    fn from(r: &EvalReport) -> Self {
        Self {
            model_id: r.model_id.clone(),
            kind: r.kind,
            overall_cka: r.overall_cka,
            accuracy: r.accuracy,
            correct: r.correct,
            total: r.total,
            n_params: r.n_params,
            n_fragments: r.n_fragments,
            per_class: r
                .per_class
                .iter()
                .map(|c| format!("{}/{}", c.correct, c.total))
                .collect::<Vec<_>>()
                .join(";"),
        }
    }
}

impl ReportRow {
    fn into_report(self, line: usize) -> Result<EvalReport> {
        let per_class = self
            .per_class
            .split(';')
            .filter(|s| !s.is_empty())
            .map(|s| {
                let (c, t) = s
                    .split_once('/')
                    .ok_or_else(|| Error::parse(line, format!("bad per-class tally '{s}'")))?;
                let num = |v: &str| {
                    v.parse::<usize>()
                        .map_err(|_| Error::parse(line, format!("bad count '{v}'")))
                };
                Ok(ClassTally {
                    correct: num(c)?,
                    total: num(t)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(EvalReport {
            model_id: self.model_id,
            kind: self.kind,
            accuracy: self.accuracy,
            correct: self.correct,
            total: self.total,
            n_params: self.n_params,
            n_fragments: self.n_fragments,
            overall_cka: self.overall_cka,
            per_class,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistogramRow {
    pub metric: String,
    pub bin: usize,
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
}

pub const HISTOGRAM_HEADER: [&str; 5] = ["metric", "bin", "lo", "hi", "count"];

/// Test accuracy against training samples consumed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    /// `finetune` or `stitchnet`.
    pub method: String,
    pub model_id: String,
    pub seed: u64,
    pub samples: usize,
    pub accuracy: f64,
}

pub const CURVE_HEADER: [&str; 5] = ["method", "model_id", "seed", "samples", "accuracy"];

const BINS: usize = 10;

fn bin_counts(metric: &str, values: &[f64], lo: f64, hi: f64, bins: usize) -> Vec<HistogramRow> {
    let width = (hi - lo) / bins as f64;
    let mut counts = vec![0; bins];
    for &v in values {
        let b = if width > 0.0 {
            (((v - lo) / width).floor() as usize).min(bins - 1)
        } else {
            0
        };
        counts[b] += 1;
    }
    counts
        .into_iter()
        .enumerate()
        .map(|(i, count)| HistogramRow {
            metric: metric.to_string(),
            bin: i,
            lo: lo + width * i as f64,
            hi: if i + 1 == bins { hi } else { lo + width * (i + 1) as f64 },
            count,
        })
        .collect()
}

/// Histograms of accuracy, fragment count, score and parameter count over
/// the stitched nets in `evals`. Accuracy and score use ten bins on [0, 1];
/// fragment counts one bin per value; parameters ten bins over their range.
pub fn histograms(evals: &[EvalReport]) -> Vec<HistogramRow> {
    let nets: Vec<&EvalReport> = evals.iter().filter(|e| e.kind == ModelKind::StitchNet).collect();
    if nets.is_empty() {
        return Vec::new();
    }
    let acc: Vec<f64> = nets.iter().map(|e| e.accuracy).collect();
    let score: Vec<f64> = nets.iter().map(|e| e.overall_cka).collect();
    let frags: Vec<f64> = nets.iter().map(|e| e.n_fragments as f64).collect();
    let params: Vec<f64> = nets.iter().map(|e| e.n_params as f64).collect();
    let max_frags = nets.iter().map(|e| e.n_fragments).max().unwrap_or(1);
    let (pmin, pmax) = params
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let mut rows = bin_counts("accuracy", &acc, 0.0, 1.0, BINS);
    rows.extend(
        bin_counts("n_fragments", &frags, 0.5, max_frags as f64 + 0.5, max_frags),
    );
    rows.extend(bin_counts("score", &score, 0.0, 1.0, BINS));
    rows.extend(bin_counts("n_params", &params, pmin, pmax.max(pmin + 1.0), BINS));
    rows
}

/// Writes `results.csv`, `histograms.csv`, `learning_curve.csv` and
/// `ensemble_sweep.csv` into `dir`.
pub fn emit_report(dir: &Path, evals: &[EvalReport], curves: &[CurveRow], sweep: &[SweepRow]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let rows: Vec<ReportRow> = evals.iter().map(ReportRow::from).collect();
    write_csv(&dir.join("results.csv"), &rows, &REPORT_HEADER)?;
    write_csv(&dir.join("histograms.csv"), &histograms(evals), &HISTOGRAM_HEADER)?;
    write_csv(&dir.join("learning_curve.csv"), curves, &CURVE_HEADER)?;
    write_csv(&dir.join("ensemble_sweep.csv"), sweep, &SWEEP_HEADER)
}

pub fn read_reports(path: &Path) -> Result<Vec<EvalReport>> {
    read_csv::<ReportRow>(path)?
        .into_iter()
        .enumerate()
        .map(|(i, r)| r.into_report(i + 1))
        .collect()
}

pub fn read_histograms(path: &Path) -> Result<Vec<HistogramRow>> {
    read_csv(path)
}

pub fn read_curves(path: &Path) -> Result<Vec<CurveRow>> {
    read_csv(path)
}

pub fn read_sweep(path: &Path) -> Result<Vec<SweepRow>> {
    read_csv(path)
}
