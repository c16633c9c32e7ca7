//! Datasets, stratified cross-validation, SGD training and classification
//! metrics.
//!
//! Metrics are exact fractions. For a confusion matrix `n` (row = actual,
//! column = predicted):
//!
//! ```text
//! precision_i = n_ii / Σ_j n_ji      recall_i = n_ii / Σ_j n_ij
//! f1_i        = 2·p_i·r_i / (p_i + r_i)
//! ```
//!
//! A zero denominator yields 0 and the class is flagged in reports. Fold
//! summaries use the sample standard deviation (divisor `n − 1`) and render
//! as `mean (SD)` in percent.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use num_rational::Ratio;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Mode};
use crate::error::{Error, Result};
use crate::model::{build_adsnn, Model, ModelConfig};
use crate::preprocess::read_image;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Sample {
    /// `H×W×3`, values in `[0, 1]`.
    pub image: Tensor<f32>,
    pub label: usize,
    pub path: PathBuf,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub class_names: Vec<String>,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>, class_names: Vec<String>) -> Result<Self> {
        let mut sorted = class_names.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != class_names.len() {
            return Err(Error::Data("duplicate class names".into()));
        }
        if let Some(s) = samples.iter().find(|s| s.label >= class_names.len()) {
            return Err(Error::Data(format!(
                "{}: label {} out of range for {} classes",
                s.path.display(),
                s.label,
                class_names.len()
            )));
        }
        let shape = samples.first().map(|s| s.image.shape().to_vec());
        if let Some(shape) = &shape {
            if shape.len() != 3 || shape[0] != shape[1] || shape[2] != 3 {
                return Err(Error::Data(format!("images must be square RGB, got {:?}", shape)));
            }
            if let Some(s) = samples.iter().find(|s| s.image.shape() != shape.as_slice()) {
                return Err(Error::Data(format!(
                    "{}: image shape {:?} differs from {:?}",
                    s.path.display(),
                    s.image.shape(),
                    shape
                )));
            }
        }
        Ok(Dataset { samples, class_names })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }

    /// Side length of the (square) images; 0 for an empty set.
    pub fn image_size(&self) -> usize {
        self.samples.first().map_or(0, |s| s.image.shape()[0])
    }

    /// Stacks the selected samples into `B×H×W×3` plus their labels.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor<f32>, Vec<usize>)> {
        let first = indices
            .first()
            .ok_or_else(|| Error::InvalidArgument("empty batch".into()))?;
        let shape = self.samples[*first].image.shape().to_vec();
        let mut data = Vec::with_capacity(indices.len() * self.samples[*first].image.len());
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            let s = &self.samples[i];
            data.extend_from_slice(s.image.data());
            labels.push(s.label);
        }
        let mut full = vec![indices.len()];
        full.extend(shape);
        Ok((Tensor::new(full, data)?, labels))
    }
}

const IMAGE_EXTENSIONS: [&str; 3] = ["png", "ppm", "pnm"];

/// Reads `root/<class>/<image>`; class labels follow sorted directory names.
/// All images must share one square size (`expected_size` when given).
pub fn load_dataset(root: &Path, expected_size: Option<usize>) -> Result<Dataset> {
    let entries = std::fs::read_dir(root).map_err(|e| Error::Data(format!("{}: {}", root.display(), e)))?;
    let mut classes: Vec<(String, PathBuf)> = Vec::new();
    for e in entries {
        let e = e.map_err(|e| Error::io(root, e))?;
        if e.path().is_dir() {
            classes.push((e.file_name().to_string_lossy().into_owned(), e.path()));
        }
    }
    classes.sort();
    if classes.is_empty() {
        return Err(Error::Data(format!("{}: no class directories", root.display())));
    }
    let mut samples = Vec::new();
    for (label, (name, dir)) in classes.iter().enumerate() {
        let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.extension()
                    .and_then(|x| x.to_str())
                    .is_some_and(|x| IMAGE_EXTENSIONS.contains(&x.to_ascii_lowercase().as_str()))
            })
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(Error::Data(format!("class directory {} has no images", dir.display())));
        }
        for path in files {
            let img = read_image(&path)?;
            if img.height != img.width || expected_size.is_some_and(|s| s != img.height) {
                return Err(Error::Data(format!(
                    "{}: image is {}x{}, expected {} square (run preprocess first)",
                    path.display(),
                    img.width,
                    img.height,
                    expected_size.map_or_else(|| "a".to_string(), |s| format!("{s}x{s}"))
                )));
            }
            log::debug!("loaded {} as class {}", path.display(), name);
            samples.push(Sample {
                image: img.to_tensor(),
                label,
                path,
            });
        }
    }
    Dataset::new(samples, classes.into_iter().map(|(n, _)| n).collect())
}

fn by_class(indices: &[usize], labels: &[usize], seed: u64) -> Vec<Vec<usize>> {
    let m = indices.iter().map(|&i| labels[i] + 1).max().unwrap_or(0);
    let mut groups = vec![Vec::new(); m];
    for &i in indices {
        groups[labels[i]].push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for g in &mut groups {
        g.shuffle(&mut rng);
    }
    groups
}

/// Stratified `k`-fold split. Each class is shuffled under `seed` and dealt
/// round-robin, so fold sizes per class differ by at most one. Returns
/// `(train, test)` index lists, each sorted.
pub fn kfold_split(labels: &[usize], k: usize, seed: u64) -> Result<Vec<(Vec<usize>, Vec<usize>)>> {
    if k < 2 {
        return Err(Error::InvalidArgument(format!("k must be >= 2, got {}", k)));
    }
    let all: Vec<usize> = (0..labels.len()).collect();
    let groups = by_class(&all, labels, seed);
    if let Some((c, g)) = groups.iter().enumerate().find(|(_, g)| !g.is_empty() && g.len() < k) {
        return Err(Error::InvalidArgument(format!(
            "k={} exceeds the {} samples of class {}",
            k,
            g.len(),
            c
        )));
    }
    let mut fold_of = vec![0usize; labels.len()];
    for g in &groups {
        for (j, &i) in g.iter().enumerate() {
            fold_of[i] = j % k;
        }
    }
    Ok((0..k)
        .map(|f| {
            let (test, train): (Vec<usize>, Vec<usize>) = all.iter().partition(|&&i| fold_of[i] == f);
            (train, test)
        })
        .collect())
}

/// Stratified split of `indices` into `round(ratio·n_c)` training samples
/// per class and the rest for validation. Both lists come back sorted.
pub fn train_val_split(indices: &[usize], labels: &[usize], ratio: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::InvalidArgument(format!("train ratio {} outside [0, 1]", ratio)));
    }
    let mut train = Vec::new();
    let mut val = Vec::new();
    for g in by_class(indices, labels, seed) {
        let n = (g.len() as f64 * ratio).round() as usize;
        train.extend_from_slice(&g[..n]);
        val.extend_from_slice(&g[n..]);
    }
    if val.is_empty() {
        log::warn!("validation set is empty (train ratio {}); the final epoch's weights are kept", ratio);
    }
    train.sort_unstable();
    val.sort_unstable();
    Ok((train, val))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            epochs: 100,
            batch_size: 16,
            learning_rate: 0.01,
            momentum: 0.9,
            seed: 0,
        }
    }
}

impl TrainOptions {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be >= 1".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument(format!("learning rate {} must be finite and >= 0", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidArgument(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    /// Accuracy on the training batches as they were seen (train mode).
    pub train_accuracy: f64,
    pub val_accuracy: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose weights were kept (1-based).
    pub best_epoch: usize,
}

impl History {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,val_accuracy\n");
        for e in &self.epochs {
            let val = e.val_accuracy.map_or(String::new(), |v| format!("{:.6}", v));
            writeln!(s, "{},{:.6},{}", e.epoch, e.train_loss, val).unwrap();
        }
        s
    }
}

/// Eval-mode predictions for `indices`, in chunks of `batch` images.
pub fn predict_indices(model: &Model<f32>, data: &Dataset, indices: &[usize], batch: usize) -> Result<Vec<usize>> {
    let mut preds = Vec::with_capacity(indices.len());
    for chunk in indices.chunks(batch.max(1)) {
        let (x, _) = data.batch(chunk)?;
        preds.extend(model.predict(&x)?.argmax_rows()?);
    }
    Ok(preds)
}

fn accuracy_of(preds: &[usize], labels: impl Iterator<Item = usize>) -> f64 {
    let hits = preds.iter().zip(labels).filter(|(p, l)| **p == *l).count();
    hits as f64 / preds.len().max(1) as f64
}

/// Mini-batch SGD with momentum on cross-entropy:
/// `v ← μ·v − lr·∇`, `w ← w + v`. Training order is reshuffled each epoch
/// from `opts.seed`. When `val` is nonempty the weights of the epoch with
/// the best validation accuracy are restored at the end (later epochs win
/// ties); otherwise the final weights are kept.
pub fn train(
    model: &mut Model<f32>,
    data: &Dataset,
    train_idx: &[usize],
    val_idx: &[usize],
    opts: &TrainOptions,
) -> Result<History> {
    opts.validate()?;
    if train_idx.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    let logits_layer = model.logits_layer();
    let mut velocity: Vec<Tensor<f32>> = model.trainable_mut().iter().map(|t| Tensor::zeros(t.shape().to_vec())).collect();
    let lr = opts.learning_rate as f32;
    let mu = opts.momentum as f32;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut order = train_idx.to_vec();
    let mut history = History::default();
    let mut best: Option<(f64, Model<f32>)> = None;

    for epoch in 1..=opts.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut hits = 0usize;
        let mut seen = 0usize;
        for (b, chunk) in order.chunks(opts.batch_size).enumerate() {
            // a single-sample batch has no batch statistics to normalize with
            if chunk.len() < 2 && order.len() >= 2 {
                continue;
            }
            let (x, labels) = data.batch(chunk)?;
            let mut g = Graph::new();
            let xv = g.constant(x);
            let pass = model.forward_graph(&mut g, xv, Mode::Train, Some(logits_layer))?;
            let logits = *pass.outputs.last().expect("model has layers");
            let loss = g.cross_entropy(logits, &labels).map_err(|e| {
                Error::NonFinite(format!("epoch {} batch {}: {}", epoch, b + 1, e))
            })?;
            let lv = g.value(loss).item()? as f64;
            let preds = g.value(logits).argmax_rows()?;
            hits += preds.iter().zip(&labels).filter(|(p, l)| p == l).count();
            seen += chunk.len();
            loss_sum += lv * chunk.len() as f64;
            let mut grads = g.backward(loss)?;
            let mut params = model.trainable_mut();
            if params.len() != pass.params.len() {
                return Err(Error::Numeric(format!(
                    "forward registered {} parameters but the model has {}",
                    pass.params.len(),
                    params.len()
                )));
            }
            for ((w, v), var) in params.iter_mut().zip(velocity.iter_mut()).zip(&pass.params) {
                let grad = grads
                    .take(*var)
                    .ok_or_else(|| Error::Numeric("missing parameter gradient".into()))?;
                if !grad.is_finite() {
                    return Err(Error::NonFinite(format!("epoch {} batch {}: non-finite gradient", epoch, b + 1)));
                }
                for ((wi, vi), gi) in w.data_mut().iter_mut().zip(v.data_mut()).zip(grad.data()) {
                    *vi = mu * *vi - lr * gi;
                    *wi += *vi;
                }
            }
            model.apply_stats(pass.stats);
        }
        let val_accuracy = if val_idx.is_empty() {
            None
        } else {
            let preds = predict_indices(model, data, val_idx, 32)?;
            Some(accuracy_of(&preds, val_idx.iter().map(|&i| data.samples[i].label)))
        };
        let rec = EpochRecord {
            epoch,
            train_loss: loss_sum / seen.max(1) as f64,
            train_accuracy: hits as f64 / seen.max(1) as f64,
            val_accuracy,
        };
        log::info!(
            "epoch {}: loss {:.4} train acc {:.3} val acc {}",
            epoch,
            rec.train_loss,
            rec.train_accuracy,
            val_accuracy.map_or("-".into(), |v| format!("{:.3}", v))
        );
        if let Some(v) = val_accuracy {
            if best.as_ref().is_none_or(|(b, _)| v >= *b) {
                best = Some((v, model.clone()));
                history.best_epoch = epoch;
            }
        } else {
            history.best_epoch = epoch;
        }
        history.epochs.push(rec);
    }
    if let Some((_, m)) = best {
        *model = m;
    }
    Ok(history)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ConfusionMatrix {
    /// `counts[i][j]`: actual class `i` predicted as `j`.
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix {
            counts: vec![vec![0; classes]; classes],
        }
    }

    pub fn from_counts(counts: Vec<Vec<u64>>) -> Result<Self> {
        let m = counts.len();
        if m == 0 || counts.iter().any(|r| r.len() != m) {
            return Err(Error::InvalidArgument("confusion matrix must be square and nonempty".into()));
        }
        Ok(ConfusionMatrix { counts })
    }

    pub fn from_predictions(classes: usize, actual: &[usize], predicted: &[usize]) -> Result<Self> {
        if actual.len() != predicted.len() {
            return Err(Error::InvalidArgument("prediction and label counts differ".into()));
        }
        let mut cm = Self::new(classes);
        for (&a, &p) in actual.iter().zip(predicted) {
            if a >= classes || p >= classes {
                return Err(Error::InvalidArgument(format!("class {} or {} out of range", a, p)));
            }
            cm.counts[a][p] += 1;
        }
        Ok(cm)
    }

    pub fn classes(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    fn check(&self, i: usize) -> Result<()> {
        if i >= self.classes() {
            return Err(Error::InvalidArgument(format!("class {} out of range ({} classes)", i, self.classes())));
        }
        Ok(())
    }

    fn row(&self, i: usize) -> u64 {
        self.counts[i].iter().sum()
    }

    fn col(&self, i: usize) -> u64 {
        self.counts.iter().map(|r| r[i]).sum()
    }

    pub fn precision(&self, i: usize) -> Result<Ratio<u64>> {
        self.check(i)?;
        Ok(ratio_or_zero(self.counts[i][i], self.col(i)))
    }

    pub fn recall(&self, i: usize) -> Result<Ratio<u64>> {
        self.check(i)?;
        Ok(ratio_or_zero(self.counts[i][i], self.row(i)))
    }

    pub fn f1(&self, i: usize) -> Result<Ratio<u64>> {
        let p = self.precision(i)?;
        let r = self.recall(i)?;
        let denom = p + r;
        if denom == Ratio::from_integer(0) {
            return Ok(Ratio::from_integer(0));
        }
        Ok(Ratio::from_integer(2) * p * r / denom)
    }

    pub fn accuracy(&self) -> Ratio<u64> {
        ratio_or_zero((0..self.classes()).map(|i| self.counts[i][i]).sum(), self.total())
    }

    /// Recall pooled over all classes: total true positives over total actuals.
    pub fn micro_recall(&self) -> Ratio<u64> {
        let tp: u64 = (0..self.classes()).map(|i| self.counts[i][i]).sum();
        let actual: u64 = (0..self.classes()).map(|i| self.row(i)).sum();
        ratio_or_zero(tp, actual)
    }

    /// Classes whose precision or recall hit a zero denominator.
    pub fn flagged_classes(&self) -> Vec<usize> {
        (0..self.classes()).filter(|&i| self.row(i) == 0 || self.col(i) == 0).collect()
    }
}

fn ratio_or_zero(n: u64, d: u64) -> Ratio<u64> {
    if d == 0 {
        Ratio::from_integer(0)
    } else {
        Ratio::new(n, d)
    }
}

pub fn to_f64(r: Ratio<u64>) -> f64 {
    *r.numer() as f64 / *r.denom() as f64
}

/// Argmax prediction per sample (ties to the lowest class index).
pub fn evaluate(model: &Model<f32>, data: &Dataset, indices: &[usize]) -> Result<ConfusionMatrix> {
    let preds = predict_indices(model, data, indices, 32)?;
    let actual: Vec<usize> = indices.iter().map(|&i| data.samples[i].label).collect();
    ConfusionMatrix::from_predictions(data.num_classes(), &actual, &preds)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub flagged: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FoldReport {
    pub fold: usize,
    pub accuracy: f64,
    pub precision_macro: f64,
    pub recall_macro: f64,
    pub f1_macro: f64,
    pub per_class: Vec<ClassMetrics>,
    /// Eval-mode accuracy on the fold's training portion.
    pub train_accuracy: f64,
    pub confusion: ConfusionMatrix,
    #[serde(skip)]
    pub train_minutes: f64,
}

impl FoldReport {
    pub fn from_confusion(fold: usize, cm: ConfusionMatrix, train_accuracy: f64, train_minutes: f64) -> Result<Self> {
        let m = cm.classes();
        let mut per_class = Vec::with_capacity(m);
        let (mut p, mut r, mut f) = (Ratio::from_integer(0), Ratio::from_integer(0), Ratio::from_integer(0));
        let flagged = cm.flagged_classes();
        for i in 0..m {
            let (pi, ri, fi) = (cm.precision(i)?, cm.recall(i)?, cm.f1(i)?);
            p += pi;
            r += ri;
            f += fi;
            per_class.push(ClassMetrics {
                precision: to_f64(pi),
                recall: to_f64(ri),
                f1: to_f64(fi),
                flagged: flagged.contains(&i),
            });
        }
        let mm = Ratio::from_integer(m as u64);
        Ok(FoldReport {
            fold,
            accuracy: to_f64(cm.accuracy()),
            precision_macro: to_f64(p / mm),
            recall_macro: to_f64(r / mm),
            f1_macro: to_f64(f / mm),
            per_class,
            train_accuracy,
            confusion: cm,
            train_minutes,
        })
    }
}

/// Mean and sample standard deviation (`n − 1`; 0 for a single value).
pub fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (0.0, 0.0);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
    (mean, (ss / (n - 1) as f64).sqrt())
}

pub fn format_mean_sd(mean: f64, sd: f64) -> String {
    format!("{:.2} ({:.2})", mean, sd)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Summary {
    pub mean: f64,
    pub sd: f64,
}

impl Summary {
    fn of(values: &[f64]) -> Self {
        let (mean, sd) = mean_sd(values);
        Summary { mean, sd }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CvReport {
    pub class_names: Vec<String>,
    pub folds: Vec<FoldReport>,
    pub accuracy: Summary,
    pub precision_macro: Summary,
    pub recall_macro: Summary,
    pub f1_macro: Summary,
    pub train_accuracy: Summary,
    /// Per class: precision, recall, f1 summaries.
    pub per_class: Vec<[Summary; 3]>,
}

pub fn aggregate_cv(class_names: &[String], folds: Vec<FoldReport>) -> Result<CvReport> {
    if folds.is_empty() {
        return Err(Error::InvalidArgument("no folds to aggregate".into()));
    }
    if let Some(f) = folds.iter().find(|f| f.per_class.len() != class_names.len()) {
        return Err(Error::InvalidArgument(format!(
            "fold {} has {} classes, expected {}",
            f.fold,
            f.per_class.len(),
            class_names.len()
        )));
    }
    let col = |f: &dyn Fn(&FoldReport) -> f64| Summary::of(&folds.iter().map(f).collect::<Vec<_>>());
    let per_class = (0..class_names.len())
        .map(|i| {
            [
                col(&|f| f.per_class[i].precision),
                col(&|f| f.per_class[i].recall),
                col(&|f| f.per_class[i].f1),
            ]
        })
        .collect();
    Ok(CvReport {
        class_names: class_names.to_vec(),
        accuracy: col(&|f| f.accuracy),
        precision_macro: col(&|f| f.precision_macro),
        recall_macro: col(&|f| f.recall_macro),
        f1_macro: col(&|f| f.f1_macro),
        train_accuracy: col(&|f| f.train_accuracy),
        per_class,
        folds,
    })
}

impl CvReport {
    /// Metrics CSV. Values are fractions; `train_minutes` is left blank
    /// when `with_timing` is false so the file is reproducible.
    pub fn to_csv(&self, with_timing: bool) -> String {
        let mut s = String::from("fold,accuracy,precision_macro,recall_macro,f1_macro,train_minutes");
        for n in &self.class_names {
            write!(s, ",precision_{n},recall_{n},f1_{n}").unwrap();
        }
        s.push('\n');
        for f in &self.folds {
            let minutes = if with_timing { format!("{:.3}", f.train_minutes) } else { String::new() };
            write!(
                s,
                "{},{:.6},{:.6},{:.6},{:.6},{}",
                f.fold, f.accuracy, f.precision_macro, f.recall_macro, f.f1_macro, minutes
            )
            .unwrap();
            for c in &f.per_class {
                write!(s, ",{:.6},{:.6},{:.6}", c.precision, c.recall, c.f1).unwrap();
            }
            s.push('\n');
        }
        let minutes: Vec<f64> = self.folds.iter().map(|f| f.train_minutes).collect();
        let (m_mean, m_sd) = mean_sd(&minutes);
        for (label, pick) in [("mean", 0usize), ("sd", 1)] {
            let v = |x: &Summary| if pick == 0 { x.mean } else { x.sd };
            let minutes = match (with_timing, pick) {
                (false, _) => String::new(),
                (true, 0) => format!("{:.3}", m_mean),
                (true, _) => format!("{:.3}", m_sd),
            };
            write!(
                s,
                "{},{:.6},{:.6},{:.6},{:.6},{}",
                label,
                v(&self.accuracy),
                v(&self.precision_macro),
                v(&self.recall_macro),
                v(&self.f1_macro),
                minutes
            )
            .unwrap();
            for c in &self.per_class {
                write!(s, ",{:.6},{:.6},{:.6}", v(&c[0]), v(&c[1]), v(&c[2])).unwrap();
            }
            s.push('\n');
        }
        s
    }

    /// Human-readable table in percent, each cell `mean (SD)`.
    pub fn render(&self) -> String {
        let pct = |x: &Summary| format_mean_sd(100.0 * x.mean, 100.0 * x.sd);
        let mut s = String::new();
        writeln!(s, "{}-fold cross-validation (percent, mean (SD))", self.folds.len()).unwrap();
        writeln!(s, "  accuracy   {}", pct(&self.accuracy)).unwrap();
        writeln!(s, "  precision  {}", pct(&self.precision_macro)).unwrap();
        writeln!(s, "  recall     {}", pct(&self.recall_macro)).unwrap();
        writeln!(s, "  f1         {}", pct(&self.f1_macro)).unwrap();
        writeln!(s, "  train acc  {}", pct(&self.train_accuracy)).unwrap();
        writeln!(s, "per class (precision / recall / f1):").unwrap();
        for (name, c) in self.class_names.iter().zip(&self.per_class) {
            let flag = if self.folds.iter().any(|f| f.per_class[self.class_names.iter().position(|n| n == name).unwrap()].flagged) {
                "  [zero denominator in some fold]"
            } else {
                ""
            };
            writeln!(s, "  {:<12} {} / {} / {}{}", name, pct(&c[0]), pct(&c[1]), pct(&c[2]), flag).unwrap();
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CvOptions {
    pub folds: usize,
    pub train_ratio: f64,
    pub train: TrainOptions,
}

impl Default for CvOptions {
    fn default() -> Self {
        CvOptions {
            folds: 5,
            train_ratio: 0.7,
            train: TrainOptions::default(),
        }
    }
}

/// Everything produced by one fold.
pub struct FoldOutcome {
    pub report: FoldReport,
    pub history: History,
    pub model: Model<f32>,
    /// Validation accuracy of the kept weights (0 when there is no validation set).
    pub best_val_accuracy: f64,
}

/// Worker count from `ADSNN_THREADS` (0 or unset means all cores).
pub fn worker_threads() -> usize {
    let auto = std::thread::available_parallelism().map_or(1, |n| n.get());
    match std::env::var("ADSNN_THREADS").ok().and_then(|v| v.trim().parse::<usize>().ok()) {
        Some(0) | None => auto,
        Some(n) => n,
    }
}

fn run_fold(
    data: &Dataset,
    config: &ModelConfig,
    opts: &CvOptions,
    seed: u64,
    fold: usize,
    train_all: &[usize],
    test: &[usize],
) -> Result<FoldOutcome> {
    let start = Instant::now();
    let labels = data.labels();
    let fold_seed = seed.wrapping_add(fold as u64);
    let (tr, val) = train_val_split(train_all, &labels, opts.train_ratio, fold_seed)?;
    let mut cfg = config.clone();
    cfg.seed = config.seed.wrapping_add(fold as u64);
    let mut model = build_adsnn::<f32>(&cfg)?;
    let mut topts = opts.train.clone();
    topts.seed = fold_seed;
    let history = train(&mut model, data, &tr, &val, &topts)?;
    let train_preds = predict_indices(&model, data, &tr, 32)?;
    let train_accuracy = accuracy_of(&train_preds, tr.iter().map(|&i| labels[i]));
    let cm = evaluate(&model, data, test)?;
    let best_val_accuracy = history
        .epochs
        .get(history.best_epoch.wrapping_sub(1))
        .and_then(|e| e.val_accuracy)
        .unwrap_or(0.0);
    let minutes = start.elapsed().as_secs_f64() / 60.0;
    let report = FoldReport::from_confusion(fold + 1, cm, train_accuracy, minutes)?;
    log::info!(
        "fold {}: test acc {:.3}, train acc {:.3} ({:.1} min)",
        fold + 1,
        report.accuracy,
        train_accuracy,
        minutes
    );
    Ok(FoldOutcome {
        report,
        history,
        model,
        best_val_accuracy,
    })
}

/// Stratified k-fold cross-validation of `config` on `data`. Fold `f`
/// builds its model with seed `config.seed + f` and trains with
/// `seed + f`; folds run on up to [`worker_threads`] threads and results
/// do not depend on the thread count.
pub fn cross_validate(data: &Dataset, config: &ModelConfig, opts: &CvOptions, seed: u64) -> Result<(CvReport, Vec<FoldOutcome>)> {
    if data.is_empty() {
        return Err(Error::Data("dataset is empty".into()));
    }
    if config.num_classes != data.num_classes() {
        return Err(Error::InvalidArgument(format!(
            "model has {} classes but the dataset has {}",
            config.num_classes,
            data.num_classes()
        )));
    }
    if config.input_size != data.image_size() {
        return Err(Error::InvalidArgument(format!(
            "model input size {} but dataset images are {}",
            config.input_size,
            data.image_size()
        )));
    }
    let splits = kfold_split(&data.labels(), opts.folds, seed)?;
    let threads = worker_threads().clamp(1, splits.len());
    let mut outcomes: Vec<Option<Result<FoldOutcome>>> = (0..splits.len()).map(|_| None).collect();
    for (g, (group, slots)) in splits.chunks(threads).zip(outcomes.chunks_mut(threads)).enumerate() {
        std::thread::scope(|scope| {
            let handles: Vec<_> = group
                .iter()
                .enumerate()
                .map(|(j, (tr, te))| {
                    let fold = g * threads + j;
                    scope.spawn(move || run_fold(data, config, opts, seed, fold, tr, te))
                })
                .collect();
            for (slot, h) in slots.iter_mut().zip(handles) {
                *slot = Some(h.join().unwrap_or_else(|_| Err(Error::Numeric("fold worker panicked".into()))));
            }
        });
    }
    let outcomes = outcomes
        .into_iter()
        .map(|o| o.expect("every fold ran"))
        .collect::<Result<Vec<_>>>()?;
    let report = aggregate_cv(&data.class_names, outcomes.iter().map(|o| o.report.clone()).collect())?;
    Ok((report, outcomes))
}
