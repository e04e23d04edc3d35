//! Desk-scale experiment drivers behind the command-line tool: equivalence
//! checks, training runs with their output directories, re-evaluation of
//! checkpoints, reconstruction dumps and raw imputation baselines.

mod config;

pub use config::{RunConfig, Task};

use std::fs;
use std::path::{Path, PathBuf};

use crate::data::{encode_pgm, parse_idx_prefix, Dataset, Rng};
use crate::equiv::{verify_equivalence, EquivalenceReport};
use crate::error::{Error, Result};
use crate::imagegraph::{apply_patch, frozen_masks, sample_patch, write_mask_file, IncompleteImage, PatchSpec};
use crate::imputation::{KnnPool, MeanStats};
use crate::parallel;
use crate::refconv::ConvMask;
use crate::tensor::{Parameterized, Tensor};
use crate::train::{
    build_autoencoder, build_classifier, build_imputer, evaluate_autoencoder, evaluate_classifier, graph_batch,
    load_checkpoint, save_checkpoint, train_autoencoder, train_classifier, Autoencoder, Checkpoint, Classifier,
    ImputerKind, Metrics, Progress,
};

pub const CONFIG_FILE: &str = "config.txt";
pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "model.ggnn";
pub const MASKS_FILE: &str = "test_masks.txt";
/// Per-epoch wall-clock seconds, kept out of the metrics file.
pub const TIMING_FILE: &str = "timing.txt";

const MNIST_TRAIN: [&str; 2] = ["train-images-idx3-ubyte", "train-labels-idx1-ubyte"];
const MNIST_TEST: [&str; 2] = ["t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"];

/// First `train` training and `test` test examples from an MNIST directory.
pub fn load_mnist(dir: impl AsRef<Path>, train: usize, test: usize) -> Result<(Dataset, Dataset)> {
    let dir = dir.as_ref();
    let load = |files: [&str; 2], n: usize| -> Result<Dataset> {
        let d = parse_idx_prefix(dir.join(files[0]), dir.join(files[1]), n)?;
        if d.len() < n && n != usize::MAX {
            return Err(Error::Config(format!(
                "{} holds {} examples, {n} requested",
                dir.join(files[0]).display(),
                d.len()
            )));
        }
        Ok(d)
    };
    Ok((load(MNIST_TRAIN, train)?, load(MNIST_TEST, test)?))
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// A trained network of either task.
#[derive(Clone, Debug)]
pub enum Model {
    Classifier(Classifier),
    Autoencoder(Autoencoder),
}

impl Model {
    pub fn build(cfg: &RunConfig, channels: usize) -> Result<Self> {
        Ok(match cfg.task {
            Task::Classify => Model::Classifier(build_classifier(&cfg.classifier(), channels)?),
            Task::Reconstruct => Model::Autoencoder(build_autoencoder(&cfg.autoencoder(), channels)?),
        })
    }

    fn params(&mut self) -> &mut dyn Parameterized {
        match self {
            Model::Classifier(m) => m,
            Model::Autoencoder(m) => m,
        }
    }
}

/// Load the configured data, then [`run_train_on`].
pub fn run_train(cfg: &RunConfig, out_dir: impl AsRef<Path>, progress: Progress<'_>) -> Result<Metrics> {
    cfg.validate()?;
    let (train, test) = load_mnist(&cfg.data_dir, cfg.train_size, cfg.test_size)?;
    run_train_on(cfg, &train, &test, out_dir, progress)
}

/// Train on the given data and fill `out_dir` with the config echo, frozen
/// test masks, metrics, timings and the final checkpoint.
pub fn run_train_on(
    cfg: &RunConfig,
    train: &Dataset,
    test: &Dataset,
    out_dir: impl AsRef<Path>,
    progress: Progress<'_>,
) -> Result<Metrics> {
    cfg.validate()?;
    let out = out_dir.as_ref();
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let text = cfg.to_text();
    write(&out.join(CONFIG_FILE), &text)?;
    let (h, w, _) = geometry(test)?;
    write_mask_file(out.join(MASKS_FILE), &cfg.masks().eval_masks(test.len(), h, w)?)?;

    let mut model = Model::build(cfg, geometry(train)?.2)?;
    let metrics = match &mut model {
        Model::Classifier(m) => {
            let c = cfg.classifier();
            let imputer = build_imputer(&c, train)?;
            train_classifier(m, &c, train, test, imputer.as_ref(), progress)?
        }
        Model::Autoencoder(m) => train_autoencoder(m, &cfg.autoencoder(), train, test, progress)?,
    };
    metrics.write_csv(out.join(METRICS_FILE))?;
    let timing: String = metrics
        .epoch_seconds
        .iter()
        .enumerate()
        .map(|(e, s)| format!("{} {s:.3}\n", e + 1))
        .collect();
    write(&out.join(TIMING_FILE), timing)?;
    save_checkpoint(out.join(CHECKPOINT_FILE), model.params(), &text)?;
    Ok(metrics)
}

/// Rebuild the model stored in a checkpoint together with its run config.
pub fn restore_model(ckpt: &Checkpoint, channels: usize) -> Result<(RunConfig, Model)> {
    let cfg = RunConfig::parse(&ckpt.metadata)?;
    let mut model = Model::build(&cfg, channels)?;
    ckpt.restore(model.params())?;
    Ok((cfg, model))
}

/// Re-evaluate a checkpoint on its run's frozen test holes. Returns only
/// summary rows, which match the training run's final rows.
pub fn run_eval(checkpoint: impl AsRef<Path>, data_dir: Option<&Path>) -> Result<Metrics> {
    let ckpt = load_checkpoint(checkpoint)?;
    let mut cfg = RunConfig::parse(&ckpt.metadata)?;
    if let Some(d) = data_dir {
        cfg.data_dir = d.to_path_buf();
    }
    let needs_train = cfg.task == Task::Classify && matches!(cfg.imputer, Some(ImputerKind::Mean | ImputerKind::Knn));
    let (train, test) = load_mnist(&cfg.data_dir, if needs_train { cfg.train_size } else { 0 }, cfg.test_size)?;
    eval_on(&ckpt, &train, &test)
}

/// [`run_eval`] on already loaded data; `train` is only used to refit imputers.
pub fn eval_on(ckpt: &Checkpoint, train: &Dataset, test: &Dataset) -> Result<Metrics> {
    let (cfg, mut model) = restore_model(ckpt, geometry(test)?.2)?;
    let (h, w, _) = geometry(test)?;
    let masks = cfg.masks().eval_masks(test.len(), h, w)?;
    let mut metrics = Metrics::default();
    match &mut model {
        Model::Classifier(m) => {
            let imputer = build_imputer(&cfg.classifier(), train)?;
            let (error, loss) = evaluate_classifier(m, test, &masks, imputer.as_ref())?;
            metrics.push(None, "test", "error", error);
            metrics.push(None, "test", "loss", loss);
        }
        Model::Autoencoder(m) => {
            let (inside, outside) = evaluate_autoencoder(m, test, &masks)?;
            metrics.push(None, "test", "mse_inside", inside);
            metrics.push(None, "test", "mse_outside", outside);
        }
    }
    Ok(metrics)
}

fn geometry(data: &Dataset) -> Result<(usize, usize, usize)> {
    match data.images.first().map(|t| t.dims()) {
        Some(&[h, w, l]) => Ok((h, w, l)),
        _ => Err(Error::Config("dataset is empty".into())),
    }
}

/// Gray level used for missing pixels in exported inputs.
pub const HOLE_GRAY: f64 = 128.0 / 255.0;

/// Write PGM dumps for the first `count` test images of a reconstruction
/// run: `NN_truth`, `NN_masked` (holes mid-gray), `NN_output` (raw network
/// output) and the `NN_mean` / `NN_knn` imputation fills.
pub fn export_recon(
    checkpoint: impl AsRef<Path>,
    out_dir: impl AsRef<Path>,
    data_dir: Option<&Path>,
    count: usize,
) -> Result<Vec<PathBuf>> {
    let ckpt = load_checkpoint(checkpoint)?;
    let mut cfg = RunConfig::parse(&ckpt.metadata)?;
    if cfg.task != Task::Reconstruct {
        return Err(Error::Config(format!(
            "export needs a reconstruct checkpoint, this one is from a {} run",
            cfg.task
        )));
    }
    if let Some(d) = data_dir {
        cfg.data_dir = d.to_path_buf();
    }
    let (train, test) = load_mnist(&cfg.data_dir, cfg.train_size.max(cfg.knn_pool), cfg.test_size)?;
    export_recon_on(&ckpt, &train, &test, out_dir, count)
}

pub fn export_recon_on(
    ckpt: &Checkpoint,
    train: &Dataset,
    test: &Dataset,
    out_dir: impl AsRef<Path>,
    count: usize,
) -> Result<Vec<PathBuf>> {
    let (cfg, model) = restore_model(ckpt, geometry(test)?.2)?;
    let Model::Autoencoder(mut model) = model else {
        return Err(Error::Config("export needs a reconstruct checkpoint".into()));
    };
    let out = out_dir.as_ref();
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let (h, w, l) = geometry(test)?;
    let count = count.min(test.len());
    if count == 0 {
        return Ok(Vec::new());
    }
    let masks = cfg.masks().eval_masks(test.len(), h, w)?;
    let imgs: Vec<IncompleteImage> = (0..count)
        .map(|i| apply_patch(&test.images[i], masks[i]))
        .collect::<Result<_>>()?;
    let recon = model.forward(&graph_batch(&imgs)?, false)?;

    let complete: Vec<IncompleteImage> = train
        .images
        .iter()
        .take(cfg.train_size)
        .map(|t| IncompleteImage::complete(t.clone()))
        .collect::<Result<_>>()?;
    let mean = MeanStats::fit(&complete)?;
    let pool_n = cfg.knn_pool.min(train.len());
    let knn = KnnPool::complete(&train.images[..pool_n], cfg.knn_k)?;

    let mut written = Vec::new();
    let mut emit = |name: String, img: &Tensor| -> Result<()> {
        let path = out.join(name);
        write(&path, encode_pgm(img)?)?;
        written.push(path);
        Ok(())
    };
    let per = h * w * l;
    for (i, img) in imgs.iter().enumerate() {
        let mut masked = img.values().clone();
        for (p, &missing) in img.missing_mask().iter().enumerate() {
            if missing {
                masked.data_mut()[p * l..(p + 1) * l].fill(HOLE_GRAY);
            }
        }
        let output = Tensor::from_vec([h, w, l], recon.data()[i * per..(i + 1) * per].to_vec())?;
        emit(format!("{i:02}_truth.pgm"), &test.images[i])?;
        emit(format!("{i:02}_masked.pgm"), &masked)?;
        emit(format!("{i:02}_output.pgm"), &output)?;
        emit(format!("{i:02}_mean.pgm"), &mean.impute(img)?)?;
        emit(format!("{i:02}_knn.pgm"), &knn.impute(img)?)?;
    }
    Ok(written)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImputeEvalOptions {
    pub imputer: ImputerKind,
    /// Leading training images used as the k-NN pool and to fit the mean.
    pub pool: usize,
    pub k: usize,
    /// Seed of the frozen test holes.
    pub seed: u64,
    pub mask_size: usize,
}

impl Default for ImputeEvalOptions {
    fn default() -> Self {
        ImputeEvalOptions {
            imputer: ImputerKind::Mean,
            pool: 10_000,
            k: 5,
            seed: 1,
            mask_size: 13,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImputeReport {
    /// Mean over images of the per-image MSE inside the hole.
    pub mse_inside: f64,
    pub images: usize,
}

/// Score a raw imputer (no training) inside frozen holes of `test`.
pub fn impute_eval(opts: &ImputeEvalOptions, train: &Dataset, test: &Dataset) -> Result<ImputeReport> {
    let (h, w, l) = geometry(test)?;
    let pool_n = opts.pool.min(train.len());
    if pool_n == 0 {
        return Err(Error::Config("imputation pool is empty".into()));
    }
    enum Fill {
        Mean(MeanStats),
        Knn(KnnPool),
    }
    let fill = match opts.imputer {
        ImputerKind::Mean => {
            let imgs: Vec<IncompleteImage> = train.images[..pool_n]
                .iter()
                .map(|t| IncompleteImage::complete(t.clone()))
                .collect::<Result<_>>()?;
            Fill::Mean(MeanStats::fit(&imgs)?)
        }
        ImputerKind::Knn => Fill::Knn(KnnPool::complete(&train.images[..pool_n], opts.k)?),
        ImputerKind::Mask => {
            return Err(Error::Config("impute-eval scores the mean and knn imputers".into()));
        }
    };
    let masks = frozen_masks(test.len(), h, w, opts.mask_size, opts.seed)?;
    let items: Vec<(usize, PatchSpec)> = masks.into_iter().enumerate().collect();
    let scores = parallel::map(&items, parallel::threads(), |&(i, patch)| -> Result<f64> {
        let img = apply_patch(&test.images[i], patch)?;
        let filled = match &fill {
            Fill::Mean(m) => m.impute(&img)?,
            Fill::Knn(p) => p.impute(&img)?,
        };
        let truth = test.images[i].data();
        let mut sum = 0.0;
        let mut n = 0usize;
        for (p, &missing) in img.missing_mask().iter().enumerate() {
            if missing {
                for c in p * l..(p + 1) * l {
                    let d = filled.data()[c] - truth[c];
                    sum += d * d;
                }
                n += l;
            }
        }
        Ok(sum / n as f64)
    });
    let mut total = 0.0;
    for s in scores {
        total += s?;
    }
    Ok(ImputeReport {
        mse_inside: total / test.len() as f64,
        images: test.len(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EquivCheckOptions {
    /// Number of random masks, on top of the two fixed fixtures.
    pub masks: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
    pub tol: f64,
    /// Side of the hole punched into each test image.
    pub hole: usize,
    /// Channel counts are drawn from `1..=max_channels`.
    pub max_channels: usize,
}

impl Default for EquivCheckOptions {
    fn default() -> Self {
        EquivCheckOptions {
            masks: 100,
            height: 16,
            width: 16,
            seed: 0,
            tol: 1e-9,
            hole: 13,
            max_channels: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EquivCase {
    pub name: String,
    pub report: EquivalenceReport,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EquivCheckReport {
    pub cases: Vec<EquivCase>,
}

impl EquivCheckReport {
    pub fn max_diff(&self) -> f64 {
        self.cases.iter().map(|c| c.report.max_diff()).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.cases.iter().all(|c| c.report.passed())
    }
}

/// Single 1 at the right-upper tap: every pixel takes its right-upper neighbor.
pub fn shift_mask() -> ConvMask {
    ConvMask::from_3x3([[0.0, 0.0, 1.0], [0.0, 0.0, 0.0], [0.0, 0.0, 0.0]])
}

/// Sum of the right-upper and left-lower neighbors.
pub fn opposite_corners_mask() -> ConvMask {
    ConvMask::from_3x3([[0.0, 0.0, 1.0], [0.0, 0.0, 0.0], [1.0, 0.0, 0.0]])
}

/// Compile random 3x3 masks (and the two fixtures) to SGCN layers and compare
/// them with direct convolution on random complete and holed images.
pub fn equiv_check(opts: &EquivCheckOptions) -> Result<EquivCheckReport> {
    let (h, w) = (opts.height, opts.width);
    if h == 0 || w == 0 || opts.max_channels == 0 {
        return Err(Error::Config("image size and channel count must be positive".into()));
    }
    if opts.hole > h.min(w) || (opts.hole == h && opts.hole == w) {
        return Err(Error::Config(format!(
            "a {0}x{0} hole does not leave observed pixels in a {h}x{w} image",
            opts.hole
        )));
    }
    let mut rng = Rng::new(opts.seed);
    let case = |name: String, mask: ConvMask, rng: &mut Rng| -> Result<EquivCase> {
        let ci = mask.in_channels();
        let values = Tensor::from_vec([h, w, ci], (0..h * w * ci).map(|_| rng.next_f64()).collect())?;
        let image = if opts.hole == 0 {
            IncompleteImage::complete(values)?
        } else {
            apply_patch(&values, sample_patch(rng, h, w, opts.hole)?)?
        };
        Ok(EquivCase {
            report: verify_equivalence(&mask, &image, opts.tol)?,
            name,
        })
    };
    let mut cases = vec![
        case("shift".into(), shift_mask(), &mut rng)?,
        case("opposite-corners".into(), opposite_corners_mask(), &mut rng)?,
    ];
    for i in 0..opts.masks {
        let mut r = rng.fork(i as u64);
        let ci = 1 + r.index(opts.max_channels);
        let co = 1 + r.index(opts.max_channels);
        let mut mask = ConvMask::random(&mut r, ci, co);
        for b in mask.bias.value.data_mut() {
            *b = r.uniform(-0.5, 0.5);
        }
        cases.push(case(format!("random-{i}"), mask, &mut r)?);
    }
    Ok(EquivCheckReport { cases })
}

/// Frozen hole file for `count` images.
pub fn make_masks(
    path: impl AsRef<Path>,
    count: usize,
    height: usize,
    width: usize,
    size: usize,
    seed: u64,
) -> Result<Vec<PatchSpec>> {
    let masks = frozen_masks(count, height, width, size, seed)?;
    write_mask_file(path, &masks)?;
    Ok(masks)
}
