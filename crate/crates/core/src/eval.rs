//! Metrics, diagnostics and result tables.
//!
//! Everything here that needs clean labels goes through the bundle's
//! [`EvalAccess`](crate::data::EvalAccess).

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use plotters::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::DatasetBundle;
use crate::error::{Error, Result};
use crate::model::{one_hot, Branch, ClassProbs, LatentCode, Reconstructor};
use crate::rng;
use crate::trainer::{features_tensor, predict_chunked, EvalRecord, TrainObserver};

const PREDICT_CHUNK: usize = 1000;

pub fn accuracy(predictions: &[usize], clean_labels: &[usize]) -> Result<f64> {
    if predictions.is_empty() {
        return Err(Error::Domain("accuracy over zero predictions".into()));
    }
    if predictions.len() != clean_labels.len() {
        return Err(Error::Domain(format!("{} predictions for {} labels", predictions.len(), clean_labels.len())));
    }
    let hits = predictions.iter().zip(clean_labels).filter(|(p, y)| p == y).count();
    Ok(hits as f64 / predictions.len() as f64)
}

/// Fraction of `selected` positions whose label is clean. An empty
/// selection is vacuously pure.
pub fn selection_purity(selected: &[usize], clean_flags: &[bool]) -> f64 {
    if selected.is_empty() {
        return 1.0;
    }
    selected.iter().filter(|&&i| clean_flags[i]).count() as f64 / selected.len() as f64
}

/// Accuracy of reading the class off content codes: block `i` scores
/// `|z_i|^2 - |z_i - mu_i|^2`, i.e. how much closer it sits to the active
/// mean than to the inactive one.
pub fn block_probe_from_codes(codes: &[Vec<f64>], labels: &[usize], active_means: &[f64], block_size: usize) -> Result<f64> {
    let preds: Vec<usize> = codes
        .iter()
        .map(|z| {
            let score = |i: usize| -> f64 {
                z[i * block_size..(i + 1) * block_size]
                    .iter()
                    .map(|v| v * v - (v - active_means[i]).powi(2))
                    .sum()
            };
            (0..active_means.len()).fold(0, |best, i| if score(i) > score(best) { i } else { best })
        })
        .collect();
    accuracy(&preds, labels)
}

/// Posterior-mean content codes of `branch`, mixed over classes with
/// `q(Y|x)`, probed against `labels`.
pub fn content_block_probe(branch: &Branch, x: &Tensor, labels: &[usize]) -> Result<f64> {
    let arch = branch.arch();
    let c = arch.num_classes;
    let n = x.dim(0)?;
    let q = branch.classify(x)?;
    let feats = branch.encoder_features(x)?;
    let mut mixed = Tensor::zeros((n, arch.content_dim()), branch.dtype(), &Device::Cpu)?;
    for class in 0..c {
        let oh = one_hot(&vec![class; n], c, branch.dtype())?;
        let g = branch.encode_from_features(&feats, &oh)?;
        let mean = g.mean.narrow(1, 0, arch.content_dim())?;
        mixed = (mixed + mean.broadcast_mul(&q.narrow(1, class, 1)?)?)?;
    }
    let codes = mixed.to_dtype(DType::F64)?.to_vec2::<f64>()?;
    let means: Vec<f64> = (0..c).map(|i| branch.prior().class_mean(i)).collect::<Result<_>>()?;
    block_probe_from_codes(&codes, labels, &means, arch.content_dim_per_class)
}

/// Largest absolute difference between reconstructions that share class and
/// content but use `style_a` versus `style_b`.
pub fn style_invariance_audit(
    model: &dyn Reconstructor,
    labels: &[usize],
    content: &Tensor,
    style_a: &Tensor,
    style_b: &Tensor,
) -> Result<f64> {
    let a = LatentCode { content: content.clone(), style: style_a.clone(), block_size: 1 };
    let b = LatentCode { content: content.clone(), style: style_b.clone(), block_size: 1 };
    let ra = model.reconstruct_from_latent(labels, &a)?;
    let rb = model.reconstruct_from_latent(labels, &b)?;
    Ok((ra - rb)?.abs()?.flatten_all()?.max(0)?.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// [`style_invariance_audit`] over `pairs` random (class, content, style,
/// style) draws.
pub fn random_style_audit(
    model: &dyn Reconstructor,
    num_classes: usize,
    content_dim: usize,
    style_dim: usize,
    pairs: usize,
    dtype: DType,
    seed: u64,
) -> Result<f64> {
    let mut rng = rng::named_rng(seed, "audit.style");
    let draw = |rng: &mut rand_chacha::ChaCha8Rng, d: usize| -> Result<Tensor> {
        Ok(Tensor::from_vec(rng::normal_vec(rng, pairs * d), (pairs, d), &Device::Cpu)?.to_dtype(dtype)?)
    };
    let content = draw(&mut rng, content_dim)?.affine(2.0, 0.0)?;
    let style_a = draw(&mut rng, style_dim)?.affine(3.0, 0.0)?;
    let style_b = draw(&mut rng, style_dim)?.affine(3.0, 0.0)?;
    let labels: Vec<usize> = (0..pairs).map(|i| i % num_classes).collect();
    style_invariance_audit(model, &labels, &content, &style_a, &style_b)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseAudit {
    pub rate: f64,
    /// Row-normalized `P(noisy = j | clean = i)`; rows without examples are zero.
    pub flip_matrix: Vec<Vec<f64>>,
    pub class_counts: Vec<usize>,
}

pub fn noise_audit(bundle: &DatasetBundle) -> Result<NoiseAudit> {
    let access = bundle.eval_access();
    let c = bundle.num_classes;
    let mut counts = vec![vec![0usize; c]; c];
    let mut flips = 0usize;
    let mut seen = 0usize;
    for e in &bundle.train {
        let clean = access
            .clean_label(e)
            .ok_or_else(|| Error::Contract(format!("train example {} has no clean label", e.index)))?;
        counts[clean][e.noisy_label] += 1;
        flips += usize::from(clean != e.noisy_label);
        seen += 1;
    }
    if seen == 0 {
        return Err(Error::Domain("noise audit of an empty training split".into()));
    }
    let class_counts: Vec<usize> = counts.iter().map(|r| r.iter().sum()).collect();
    let flip_matrix = counts
        .iter()
        .zip(&class_counts)
        .map(|(row, &n)| row.iter().map(|&k| if n == 0 { 0.0 } else { k as f64 / n as f64 }).collect())
        .collect();
    Ok(NoiseAudit { rate: flips as f64 / seen as f64, flip_matrix, class_counts })
}

/// Observer that scores networks on the clean test split and tracks the
/// purity of co-teaching selections. All clean labels are read once, at
/// construction.
pub struct CleanEvaluator {
    test_x: Tensor,
    test_labels: Vec<usize>,
    clean_train: HashMap<u64, bool>,
    selected: u64,
    selected_clean: u64,
    pub purity_by_epoch: Vec<(usize, f64)>,
}

impl CleanEvaluator {
    pub fn new(bundle: &DatasetBundle) -> Result<Self> {
        let access = bundle.eval_access();
        let test_labels = access
            .clean_labels(&bundle.test)
            .into_iter()
            .collect::<Option<Vec<_>>>()
            .ok_or_else(|| Error::Contract("test split lacks clean labels".into()))?;
        let clean_train = bundle
            .train
            .iter()
            .filter_map(|e| access.clean_label(e).map(|c| (e.index, c == e.noisy_label)))
            .collect();
        let test_x = features_tensor(bundle.test.iter().map(|e| e.features.as_slice()), bundle.feature_shape, DType::F32)?;
        Ok(CleanEvaluator { test_x, test_labels, clean_train, selected: 0, selected_clean: 0, purity_by_epoch: Vec::new() })
    }

    pub fn test_inputs(&self) -> &Tensor {
        &self.test_x
    }

    pub fn test_labels(&self) -> &[usize] {
        &self.test_labels
    }

    pub fn evaluate(&self, models: &[&dyn ClassProbs]) -> Result<(Vec<f64>, f64)> {
        let single = (0..models.len())
            .map(|i| accuracy(&predict_chunked(models, &self.test_x, Some(i), PREDICT_CHUNK)?, &self.test_labels))
            .collect::<Result<Vec<_>>>()?;
        let ensemble = accuracy(&predict_chunked(models, &self.test_x, None, PREDICT_CHUNK)?, &self.test_labels)?;
        Ok((single, ensemble))
    }
}

impl TrainObserver for CleanEvaluator {
    fn on_selection(&mut self, _epoch: usize, selected: &[Vec<u64>]) {
        for idx in selected.iter().flatten() {
            if let Some(&clean) = self.clean_train.get(idx) {
                self.selected += 1;
                self.selected_clean += u64::from(clean);
            }
        }
    }

    fn on_epoch_end(&mut self, epoch: usize, models: &[&dyn ClassProbs]) -> Result<Option<EvalRecord>> {
        let (accuracy, ensemble_accuracy) = self.evaluate(models)?;
        let purity = (self.selected > 0).then(|| self.selected_clean as f64 / self.selected as f64);
        if let Some(p) = purity {
            self.purity_by_epoch.push((epoch, p));
        }
        self.selected = 0;
        self.selected_clean = 0;
        Ok(Some(EvalRecord { accuracy, ensemble_accuracy, purity }))
    }
}

/// One (method, dataset, noise, seed) result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub method: String,
    pub dataset: String,
    pub noise_family: String,
    pub noise_rate: f64,
    pub seed: u64,
    pub accuracy: f64,
    pub purity: Option<f64>,
    pub runtime_secs: f64,
}

impl MetricRow {
    pub fn group_key(&self) -> (String, String, String, u64) {
        (self.method.clone(), self.dataset.clone(), self.noise_family.clone(), self.noise_rate.to_bits())
    }

    pub fn key(&self) -> (String, String, String, u64, u64) {
        let (m, d, f, r) = self.group_key();
        (m, d, f, r, self.seed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub method: String,
    pub dataset: String,
    pub noise_family: String,
    pub noise_rate: f64,
    pub seeds: usize,
    pub accuracy_mean: f64,
    /// Sample standard deviation; absent with fewer than two seeds.
    pub accuracy_std: Option<f64>,
    pub purity_mean: Option<f64>,
    pub runtime_mean: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricTable {
    pub rows: Vec<MetricRow>,
}

fn mean_std(values: &[f64]) -> (f64, Option<f64>) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = (values.len() >= 2).then(|| (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt());
    (mean, std)
}

impl MetricTable {
    /// Rows sorted by key, so aggregation order never depends on insertion.
    pub fn sorted_rows(&self) -> Vec<&MetricRow> {
        let mut rows: Vec<&MetricRow> = self.rows.iter().collect();
        rows.sort_by(|a, b| a.key().cmp(&b.key()));
        rows
    }

    pub fn aggregate(&self) -> Vec<AggregateRow> {
        let mut groups: BTreeMap<_, Vec<&MetricRow>> = BTreeMap::new();
        for row in self.sorted_rows() {
            groups.entry(row.group_key()).or_default().push(row);
        }
        groups
            .into_values()
            .map(|rows| {
                let acc: Vec<f64> = rows.iter().map(|r| r.accuracy).collect();
                let (accuracy_mean, accuracy_std) = mean_std(&acc);
                let purities: Vec<f64> = rows.iter().filter_map(|r| r.purity).collect();
                let purity_mean = (!purities.is_empty()).then(|| mean_std(&purities).0);
                let runtime: Vec<f64> = rows.iter().map(|r| r.runtime_secs).collect();
                AggregateRow {
                    method: rows[0].method.clone(),
                    dataset: rows[0].dataset.clone(),
                    noise_family: rows[0].noise_family.clone(),
                    noise_rate: rows[0].noise_rate,
                    seeds: rows.len(),
                    accuracy_mean,
                    accuracy_std,
                    purity_mean,
                    runtime_mean: mean_std(&runtime).0,
                }
            })
            .collect()
    }

    /// Merges `other`; a row whose key already exists with a different
    /// result is a conflict.
    pub fn merge(&mut self, other: &MetricTable) -> Result<()> {
        let mut conflicts = Vec::new();
        for row in &other.rows {
            match self.rows.iter().find(|r| r.key() == row.key()) {
                Some(existing) if existing.accuracy.to_bits() != row.accuracy.to_bits() || existing.purity != row.purity => {
                    conflicts.push(format!(
                        "{}/{}/{}@{}/seed {}: {} vs {}",
                        row.method, row.dataset, row.noise_family, row.noise_rate, row.seed, existing.accuracy, row.accuracy
                    ));
                }
                Some(_) => {}
                None => self.rows.push(row.clone()),
            }
        }
        if conflicts.is_empty() {
            Ok(())
        } else {
            Err(Error::Conflict(conflicts.join("; ")))
        }
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::ingestion(path, e.to_string()))?;
        for row in self.sorted_rows() {
            w.serialize(row).map_err(|e| Error::ingestion(path, e.to_string()))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path).map_err(|e| Error::ingestion(path, e.to_string()))?;
        let rows = r
            .deserialize()
            .collect::<std::result::Result<Vec<MetricRow>, _>>()
            .map_err(|e| Error::ingestion(path, e.to_string()))?;
        Ok(MetricTable { rows })
    }
}

pub fn write_aggregate_csv(rows: &[AggregateRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::ingestion(path, e.to_string()))?;
    for row in rows {
        w.serialize(row).map_err(|e| Error::ingestion(path, e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

/// Markdown table of aggregates, accuracy in percent.
pub fn markdown_summary(rows: &[AggregateRow]) -> String {
    let mut out = String::from("| method | dataset | noise | rate | seeds | accuracy (%) | purity |\n|---|---|---|---|---|---|---|\n");
    for r in rows {
        let acc = match r.accuracy_std {
            Some(s) => format!("{:.2} ± {:.2}", 100.0 * r.accuracy_mean, 100.0 * s),
            None => format!("{:.2}", 100.0 * r.accuracy_mean),
        };
        let purity = r.purity_mean.map_or("-".to_string(), |p| format!("{p:.3}"));
        out.push_str(&format!(
            "| {} | {} | {} | {} | {} | {} | {} |\n",
            r.method, r.dataset, r.noise_family, r.noise_rate, r.seeds, acc, purity
        ));
    }
    out
}

fn plot_err(e: impl std::fmt::Display) -> Error {
    Error::Io(std::io::Error::other(e.to_string()))
}

const COLORS: [RGBColor; 6] = [RGBColor(31, 119, 180), RGBColor(255, 127, 14), RGBColor(44, 160, 44), RGBColor(214, 39, 40), RGBColor(148, 103, 189), RGBColor(140, 86, 75)];

/// Line plot of named `(x, y)` series.
pub fn line_plot(path: &Path, title: &str, x_label: &str, y_label: &str, series: &[(String, Vec<(f64, f64)>)]) -> Result<()> {
    let points = series.iter().flat_map(|(_, s)| s.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in points {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    let pad_x = ((x1 - x0) * 0.05).max(1e-3);
    let pad_y = ((y1 - y0) * 0.1).max(1e-3);
    let root = SVGBackend::new(path, (720, 480)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(56)
        .build_cartesian_2d((x0 - pad_x)..(x1 + pad_x), (y0 - pad_y)..(y1 + pad_y))
        .map_err(plot_err)?;
    chart.configure_mesh().x_desc(x_label).y_desc(y_label).draw().map_err(plot_err)?;
    for (i, (name, pts)) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        chart
            .draw_series(LineSeries::new(pts.iter().copied(), color.stroke_width(2)))
            .map_err(plot_err)?
            .label(name.as_str())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color.stroke_width(2)));
        chart.draw_series(pts.iter().map(|&p| Circle::new(p, 3, color.filled()))).map_err(plot_err)?;
    }
    chart.configure_series_labels().background_style(WHITE.mix(0.8)).border_style(BLACK).draw().map_err(plot_err)?;
    root.present().map_err(plot_err)?;
    Ok(())
}

/// Accuracy-vs-noise-rate curves, one line per method, for `dataset`.
pub fn plot_accuracy_vs_noise(rows: &[AggregateRow], dataset: &str, path: &Path) -> Result<()> {
    let mut by_method: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.dataset == dataset) {
        by_method.entry(r.method.clone()).or_default().push((r.noise_rate, 100.0 * r.accuracy_mean));
    }
    let series: Vec<_> = by_method
        .into_iter()
        .map(|(m, mut pts)| {
            pts.sort_by(|a, b| a.0.total_cmp(&b.0));
            (m, pts)
        })
        .collect();
    line_plot(path, &format!("{dataset}: test accuracy"), "noise rate", "accuracy (%)", &series)
}
