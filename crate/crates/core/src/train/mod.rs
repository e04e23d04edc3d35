//! Model assembly, training loops and evaluation for classification and
//! reconstruction of incomplete images.
//!
//! Training images get a fresh random square hole every epoch (unless
//! disabled); test images use one frozen hole each. Graph models see the pixel
//! graph of the holed image, CNN baselines see an imputed grid of the same
//! holed image.

mod checkpoint;
mod metrics;
mod model;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use metrics::{MetricRow, Metrics};
pub use model::{
    Autoencoder, Classifier, ClassifierInput, CnnClassifier, Decoder, GraphClassifier, GraphLayer,
};

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use crate::data::{Dataset, Rng};
use crate::error::{Error, Result};
use crate::imagegraph::{apply_patch, build_graph, sample_patch, GraphBatch, IncompleteImage, PatchSpec};
use crate::imputation::{Imputer, KnnPool, MeanStats};
use crate::nn::{masked_mse_batch, softmax_xent, AdamState, BatchNorm, Region};
use crate::parallel;
use crate::tensor::{Parameterized, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Backbone {
    Sgcn,
    Gcn,
    Cnn,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ImputerKind {
    Mask,
    Mean,
    Knn,
}

macro_rules! keyword_enum {
    ($ty:ident { $($variant:ident => $word:literal),* $(,)? }) => {
        impl FromStr for $ty {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($word => Ok($ty::$variant),)*
                    _ => Err(Error::Config(format!(
                        concat!("unknown ", stringify!($ty), " '{}' (expected one of: ", $($word, " ",)* ")"),
                        s
                    ))),
                }
            }
        }

        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self {
                    $($ty::$variant => $word,)*
                })
            }
        }
    };
}

keyword_enum!(Backbone { Sgcn => "sgcn", Gcn => "gcn", Cnn => "cnn" });
keyword_enum!(ImputerKind { Mask => "mask", Mean => "mean", Knn => "knn" });

/// How holes are placed on training and test images.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MaskProtocol {
    /// Side of the square hole.
    pub size: usize,
    /// Draw new training holes every epoch; otherwise one fixed set.
    pub resample: bool,
    /// Seed of the frozen test holes.
    pub eval_seed: u64,
}

impl Default for MaskProtocol {
    fn default() -> Self {
        MaskProtocol {
            size: 13,
            resample: true,
            eval_seed: 1,
        }
    }
}

impl MaskProtocol {
    /// Training holes for `epoch`, one per image index.
    pub fn train_masks(&self, seed: u64, epoch: usize, count: usize, h: usize, w: usize) -> Result<Vec<PatchSpec>> {
        let tag = if self.resample { 1 + epoch as u64 } else { 1 };
        let mut rng = Rng::new(seed).fork(0x4d41_534b_0000_0000 | tag);
        (0..count).map(|_| sample_patch(&mut rng, h, w, self.size)).collect()
    }

    pub fn eval_masks(&self, count: usize, h: usize, w: usize) -> Result<Vec<PatchSpec>> {
        crate::imagegraph::frozen_masks(count, h, w, self.size, self.eval_seed)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierConfig {
    pub backbone: Backbone,
    /// Required for `cnn`, rejected otherwise.
    pub imputer: Option<ImputerKind>,
    pub layers: usize,
    pub width: usize,
    /// SGCN filters per layer.
    pub filters: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub classes: usize,
    pub masks: MaskProtocol,
    pub knn_k: usize,
    /// Training images used as the k-NN pool.
    pub knn_pool: usize,
    /// Training images used to recompute batch-norm statistics after each
    /// epoch; 0 keeps the running averages.
    pub bn_refresh: usize,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            backbone: Backbone::Sgcn,
            imputer: None,
            layers: 4,
            width: 32,
            filters: 4,
            epochs: 10,
            batch_size: 32,
            lr: 1e-3,
            seed: 0,
            classes: 10,
            masks: MaskProtocol::default(),
            knn_k: 5,
            knn_pool: 10_000,
            bn_refresh: 1024,
        }
    }
}

fn positive(name: &str, v: usize) -> Result<()> {
    if v == 0 {
        return Err(Error::Config(format!("{name} must be positive")));
    }
    Ok(())
}

impl ClassifierConfig {
    pub fn validate(&self) -> Result<()> {
        for (n, v) in [
            ("layers", self.layers),
            ("width", self.width),
            ("filters", self.filters),
            ("epochs", self.epochs),
            ("classes", self.classes),
            ("mask_size", self.masks.size),
            ("knn_k", self.knn_k),
        ] {
            positive(n, v)?;
        }
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be at least 2 (batch norm)".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config("lr must be positive".into()));
        }
        match (self.backbone, self.imputer) {
            (Backbone::Cnn, None) => Err(Error::Config("the cnn backbone needs an imputer".into())),
            (Backbone::Sgcn | Backbone::Gcn, Some(_)) => {
                Err(Error::Config("imputers apply to the cnn backbone only".into()))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AutoencoderConfig {
    pub encoder_widths: Vec<usize>,
    pub filters: usize,
    pub batch_norm: bool,
    pub decoder_widths: [usize; 4],
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub masks: MaskProtocol,
    /// See [`ClassifierConfig::bn_refresh`].
    pub bn_refresh: usize,
}

impl Default for AutoencoderConfig {
    fn default() -> Self {
        AutoencoderConfig {
            encoder_widths: vec![16, 16, 32, 32, 32],
            filters: 4,
            batch_norm: true,
            decoder_widths: [32, 32, 32, 16],
            epochs: 10,
            batch_size: 32,
            lr: 1e-3,
            seed: 0,
            masks: MaskProtocol::default(),
            bn_refresh: 1024,
        }
    }
}

impl AutoencoderConfig {
    pub fn validate(&self) -> Result<()> {
        positive("filters", self.filters)?;
        positive("epochs", self.epochs)?;
        positive("mask_size", self.masks.size)?;
        if self.encoder_widths.is_empty() || self.encoder_widths.contains(&0) || self.decoder_widths.contains(&0) {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be at least 2 (batch norm)".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config("lr must be positive".into()));
        }
        Ok(())
    }
}

fn image_geometry(data: &Dataset) -> Result<(usize, usize, usize)> {
    match data.images.first().map(|t| t.dims()) {
        Some(&[h, w, l]) => Ok((h, w, l)),
        _ => Err(Error::Config("dataset is empty".into())),
    }
}

pub fn build_classifier(cfg: &ClassifierConfig, channels: usize) -> Result<Classifier> {
    cfg.validate()?;
    let mut rng = Rng::new(cfg.seed).fork(0x4d4f_4445_4c00_0000);
    Ok(match cfg.backbone {
        Backbone::Sgcn => Classifier::Graph(GraphClassifier::new(
            &mut rng,
            channels,
            cfg.layers,
            cfg.width,
            Some(cfg.filters),
            cfg.classes,
        )),
        Backbone::Gcn => {
            Classifier::Graph(GraphClassifier::new(&mut rng, channels, cfg.layers, cfg.width, None, cfg.classes))
        }
        Backbone::Cnn => {
            let c = if cfg.imputer == Some(ImputerKind::Mask) { channels + 1 } else { channels };
            Classifier::Cnn(CnnClassifier::new(&mut rng, c, cfg.layers, cfg.width, cfg.classes))
        }
    })
}

pub fn build_autoencoder(cfg: &AutoencoderConfig, channels: usize) -> Result<Autoencoder> {
    cfg.validate()?;
    let mut rng = Rng::new(cfg.seed).fork(0x4d4f_4445_4c00_0000);
    Autoencoder::new(
        &mut rng,
        channels,
        &cfg.encoder_widths,
        cfg.filters,
        cfg.batch_norm,
        cfg.decoder_widths,
    )
}

/// Fit the CNN imputer on complete training images.
pub fn build_imputer(cfg: &ClassifierConfig, train: &Dataset) -> Result<Option<Imputer>> {
    Ok(match cfg.imputer {
        None => None,
        Some(ImputerKind::Mask) => Some(Imputer::ZeroMask),
        Some(ImputerKind::Mean) => {
            let imgs = train
                .images
                .iter()
                .map(|t| IncompleteImage::complete(t.clone()))
                .collect::<Result<Vec<_>>>()?;
            Some(Imputer::Mean(MeanStats::fit(&imgs)?))
        }
        Some(ImputerKind::Knn) => {
            let n = cfg.knn_pool.min(train.len());
            Some(Imputer::Knn(KnnPool::complete(&train.images[..n], cfg.knn_k)?))
        }
    })
}

/// Holed copies of `data.images[indices]`.
fn holed(data: &Dataset, indices: &[usize], masks: &[PatchSpec]) -> Result<Vec<IncompleteImage>> {
    indices.iter().map(|&i| apply_patch(&data.images[i], masks[i])).collect()
}

pub fn graph_batch(images: &[IncompleteImage]) -> Result<GraphBatch> {
    let first = images.first().ok_or(Error::EmptyGraph)?;
    let graphs = parallel::map(images, parallel::threads(), build_graph)
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    GraphBatch::new(&graphs, first.height(), first.width())
}

/// Stack imputed grids into `[B x n x m x C]`. `skip[i]` is the k-NN pool
/// index of image `i`'s clean copy, if it has one.
pub fn imputed_batch(images: &[IncompleteImage], imputer: &Imputer, skip: &[Option<usize>]) -> Result<Tensor> {
    let first = images.first().ok_or(Error::EmptyGraph)?;
    let items: Vec<(&IncompleteImage, Option<usize>)> = images.iter().zip(skip.iter().copied()).collect();
    let grids = parallel::map(&items, parallel::threads(), |(img, s)| imputer.impute_excluding(img, *s));
    let c = imputer.output_channels(first.channels());
    let mut data = Vec::with_capacity(images.len() * first.height() * first.width() * c);
    for g in grids {
        data.extend_from_slice(g?.data());
    }
    Tensor::from_vec([images.len(), first.height(), first.width(), c], data)
}

fn classifier_input(
    model: &Classifier,
    images: &[IncompleteImage],
    imputer: Option<&Imputer>,
    skip: &[Option<usize>],
) -> Result<ClassifierInput> {
    match model {
        Classifier::Graph(_) => Ok(ClassifierInput::Graph(graph_batch(images)?)),
        Classifier::Cnn(_) => {
            let imputer = imputer.ok_or_else(|| Error::Config("the cnn backbone needs an imputer".into()))?;
            Ok(ClassifierInput::Grid(imputed_batch(images, imputer, skip)?))
        }
    }
}

fn count_errors(logits: &Tensor, labels: &[usize]) -> usize {
    labels
        .iter()
        .enumerate()
        .filter(|&(i, &y)| {
            let row = logits.row(i);
            let pred = (0..row.len()).fold(0, |best, c| if row[c] > row[best] { c } else { best });
            pred != y
        })
        .count()
}

fn check_finite(loss: f64, what: &str, epoch: usize, batch: usize) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!(
            "{what} is {loss} at epoch {epoch}, batch {batch}; training diverged"
        )))
    }
}

const EVAL_BATCH: usize = 100;

/// Classification error rate and mean cross-entropy on holed test images.
pub fn evaluate_classifier(
    model: &mut Classifier,
    test: &Dataset,
    masks: &[PatchSpec],
    imputer: Option<&Imputer>,
) -> Result<(f64, f64)> {
    if test.is_empty() {
        return Err(Error::Config("test set is empty".into()));
    }
    let mut errors = 0;
    let mut loss = 0.0;
    let all: Vec<usize> = (0..test.len()).collect();
    for chunk in all.chunks(EVAL_BATCH) {
        let imgs = holed(test, chunk, masks)?;
        let input = classifier_input(model, &imgs, imputer, &vec![None; chunk.len()])?;
        let logits = model.forward(&input, false)?;
        let labels: Vec<usize> = chunk.iter().map(|&i| test.labels[i]).collect();
        let (l, _) = softmax_xent(&logits, &labels)?;
        loss += l * chunk.len() as f64;
        errors += count_errors(&logits, &labels);
    }
    Ok((errors as f64 / test.len() as f64, loss / test.len() as f64))
}

/// Mean per-image MSE inside and outside the frozen test holes.
pub fn evaluate_autoencoder(model: &mut Autoencoder, test: &Dataset, masks: &[PatchSpec]) -> Result<(f64, f64)> {
    if test.is_empty() {
        return Err(Error::Config("test set is empty".into()));
    }
    let (mut inside, mut outside) = (0.0, 0.0);
    let all: Vec<usize> = (0..test.len()).collect();
    for chunk in all.chunks(EVAL_BATCH) {
        let imgs = holed(test, chunk, masks)?;
        let pred = model.forward(&graph_batch(&imgs)?, false)?;
        let target = stack(test, chunk)?;
        let missing: Vec<&[bool]> = imgs.iter().map(|im| im.missing_mask()).collect();
        let n = chunk.len() as f64;
        inside += masked_mse_batch(&pred, &target, &missing, Region::Inside)?.0 * n;
        outside += masked_mse_batch(&pred, &target, &missing, Region::Outside)?.0 * n;
    }
    let n = test.len() as f64;
    Ok((inside / n, outside / n))
}

/// Ground-truth images `[B x n x m x l]`.
fn stack(data: &Dataset, indices: &[usize]) -> Result<Tensor> {
    let first = data.images[indices[0]].dims().to_vec();
    let mut out = Vec::with_capacity(indices.len() * data.images[indices[0]].numel());
    for &i in indices {
        out.extend_from_slice(data.images[i].data());
    }
    let mut dims = vec![indices.len()];
    dims.extend(first);
    Tensor::from_vec(dims, out)
}

/// Shuffled mini-batches for `epoch`; a trailing batch of one is dropped
/// because batch norm needs two rows.
fn epoch_batches(seed: u64, epoch: usize, n: usize, batch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    Rng::new(seed).fork(0x5348_5546_0000_0000 | epoch as u64).shuffle(&mut order);
    order.chunks(batch).filter(|c| c.len() >= 2).map(<[usize]>::to_vec).collect()
}

/// Leading training images in batches, for batch-norm refreshes.
fn refresh_batches(n: usize, count: usize, batch: usize) -> Vec<Vec<usize>> {
    let idx: Vec<usize> = (0..count.min(n)).collect();
    idx.chunks(batch).filter(|c| c.len() >= 2).map(<[usize]>::to_vec).collect()
}

/// Replace batch-norm running statistics by the exact average of per-batch
/// statistics over `batches`, with all weights frozen. Running averages lag
/// behind the weights during training, and a mean-pooled readout is
/// sensitive to that lag.
fn refresh_batch_norm<M>(
    model: &mut M,
    batches: &[Vec<usize>],
    bns: fn(&mut M) -> Vec<&mut BatchNorm>,
    mut forward: impl FnMut(&mut M, &[usize]) -> Result<()>,
) -> Result<()> {
    if batches.is_empty() || bns(model).is_empty() {
        return Ok(());
    }
    let saved: Vec<f64> = bns(model).iter().map(|b| b.momentum).collect();
    for bn in bns(model) {
        bn.running_mean.data_mut().fill(0.0);
        bn.running_var.data_mut().fill(0.0);
    }
    for (t, batch) in batches.iter().enumerate() {
        for bn in bns(model) {
            bn.momentum = 1.0 / (t + 1) as f64;
        }
        forward(model, batch)?;
    }
    for (bn, m) in bns(model).into_iter().zip(saved) {
        bn.momentum = m;
    }
    Ok(())
}

/// Progress callback: receives one human-readable line per epoch.
pub type Progress<'a> = &'a mut dyn FnMut(&str);

/// Train with Adam on softmax cross-entropy, evaluating on `test` after every epoch.
pub fn train_classifier(
    model: &mut Classifier,
    cfg: &ClassifierConfig,
    train: &Dataset,
    test: &Dataset,
    imputer: Option<&Imputer>,
    progress: Progress<'_>,
) -> Result<Metrics> {
    cfg.validate()?;
    let (h, w, _) = image_geometry(train)?;
    let eval_masks = cfg.masks.eval_masks(test.len(), h, w)?;
    let pool_size = match imputer {
        Some(Imputer::Knn(p)) => p.len(),
        _ => 0,
    };
    let mut adam = AdamState::new(cfg.lr);
    let mut metrics = Metrics::default();
    model.zero_grads();
    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let masks = cfg.masks.train_masks(cfg.seed, epoch, train.len(), h, w)?;
        let (mut loss_sum, mut errors, mut seen) = (0.0, 0usize, 0usize);
        for (bi, batch) in epoch_batches(cfg.seed, epoch, train.len(), cfg.batch_size).iter().enumerate() {
            let imgs = holed(train, batch, &masks)?;
            let skip: Vec<Option<usize>> = batch.iter().map(|&i| (i < pool_size).then_some(i)).collect();
            let input = classifier_input(model, &imgs, imputer, &skip)?;
            let labels: Vec<usize> = batch.iter().map(|&i| train.labels[i]).collect();
            let logits = model.forward(&input, true)?;
            let (loss, grad) = softmax_xent(&logits, &labels)?;
            check_finite(loss, "training loss", epoch, bi)?;
            model.backward(&input, &grad)?;
            adam.step(model);
            loss_sum += loss * batch.len() as f64;
            errors += count_errors(&logits, &labels);
            seen += batch.len();
        }
        refresh_batch_norm(
            model,
            &refresh_batches(train.len(), cfg.bn_refresh, cfg.batch_size),
            Classifier::batch_norms_mut,
            |m, batch| {
                let imgs = holed(train, batch, &masks)?;
                let skip: Vec<Option<usize>> = batch.iter().map(|&i| (i < pool_size).then_some(i)).collect();
                let input = classifier_input(m, &imgs, imputer, &skip)?;
                m.forward(&input, true).map(drop)
            },
        )?;
        let train_loss = loss_sum / seen as f64;
        let train_error = errors as f64 / seen as f64;
        let (test_error, test_loss) = evaluate_classifier(model, test, &eval_masks, imputer)?;
        metrics.push(Some(epoch + 1), "train", "loss", train_loss);
        metrics.push(Some(epoch + 1), "train", "error", train_error);
        metrics.push(Some(epoch + 1), "test", "loss", test_loss);
        metrics.push(Some(epoch + 1), "test", "error", test_error);
        let secs = start.elapsed().as_secs_f64();
        metrics.epoch_seconds.push(secs);
        progress(&format!(
            "epoch {:>3}  train loss {train_loss:.4}  train error {train_error:.4}  test error {test_error:.4}  ({secs:.1}s)",
            epoch + 1
        ));
    }
    let (test_error, test_loss) = (
        metrics.last("test", "error").unwrap_or(f64::NAN),
        metrics.last("test", "loss").unwrap_or(f64::NAN),
    );
    metrics.push(None, "test", "error", test_error);
    metrics.push(None, "test", "loss", test_loss);
    Ok(metrics)
}

/// Train with Adam on the MSE over observed pixels only.
pub fn train_autoencoder(
    model: &mut Autoencoder,
    cfg: &AutoencoderConfig,
    train: &Dataset,
    test: &Dataset,
    progress: Progress<'_>,
) -> Result<Metrics> {
    cfg.validate()?;
    let (h, w, _) = image_geometry(train)?;
    let eval_masks = cfg.masks.eval_masks(test.len(), h, w)?;
    let mut adam = AdamState::new(cfg.lr);
    let mut metrics = Metrics::default();
    model.zero_grads();
    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let masks = cfg.masks.train_masks(cfg.seed, epoch, train.len(), h, w)?;
        let (mut loss_sum, mut seen) = (0.0, 0usize);
        for (bi, batch) in epoch_batches(cfg.seed, epoch, train.len(), cfg.batch_size).iter().enumerate() {
            let imgs = holed(train, batch, &masks)?;
            let gb = graph_batch(&imgs)?;
            let pred = model.forward(&gb, true)?;
            let target = stack(train, batch)?;
            let missing: Vec<&[bool]> = imgs.iter().map(|im| im.missing_mask()).collect();
            let (loss, grad) = masked_mse_batch(&pred, &target, &missing, Region::Outside)?;
            check_finite(loss, "training loss", epoch, bi)?;
            model.backward(&gb, &grad)?;
            adam.step(model);
            loss_sum += loss * batch.len() as f64;
            seen += batch.len();
        }
        refresh_batch_norm(
            model,
            &refresh_batches(train.len(), cfg.bn_refresh, cfg.batch_size),
            Autoencoder::batch_norms_mut,
            |m, batch| m.forward(&graph_batch(&holed(train, batch, &masks)?)?, true).map(drop),
        )?;
        let train_loss = loss_sum / seen as f64;
        let (inside, outside) = evaluate_autoencoder(model, test, &eval_masks)?;
        metrics.push(Some(epoch + 1), "train", "mse_outside", train_loss);
        metrics.push(Some(epoch + 1), "test", "mse_inside", inside);
        metrics.push(Some(epoch + 1), "test", "mse_outside", outside);
        let secs = start.elapsed().as_secs_f64();
        metrics.epoch_seconds.push(secs);
        progress(&format!(
            "epoch {:>3}  train mse outside {train_loss:.5}  test mse inside {inside:.5}  outside {outside:.5}  ({secs:.1}s)",
            epoch + 1
        ));
    }
    for m in ["mse_inside", "mse_outside"] {
        let v = metrics.last("test", m).unwrap_or(f64::NAN);
        metrics.push(None, "test", m, v);
    }
    Ok(metrics)
}
